// Copyright 2026 The Lightsphere Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <openssl/evp.h>
#include <openssl/sha.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "lightsphere/image.hpp"
#include "lightsphere/renderer.hpp"

// Wire protocol: every message is a UTF-8 JSON object. Plain TCP peers
// frame each message with a 4-byte little-endian length; a peer whose
// first bytes are "GET " is upgraded to WebSocket and uses text frames.

namespace nls {

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string base64_encode(const std::uint8_t* data, std::size_t n) {
  std::string out(4 * ((n + 2) / 3), '\0');
  const int len = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), data, static_cast<int>(n));
  out.resize(static_cast<std::size_t>(len));
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& s) {
  if (s.size() % 4 != 0) throw ProtocolError("base64 length must be a multiple of 4");
  std::vector<std::uint8_t> out(3 * (s.size() / 4));
  const int len = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(s.data()),
                                  static_cast<int>(s.size()));
  if (len < 0) throw ProtocolError("invalid base64");
  std::size_t pad = 0;
  if (!s.empty() && s.back() == '=') ++pad;
  if (s.size() > 1 && s[s.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(len) - pad);
  return out;
}

struct PoseMessage {
  double yaw = 0, pitch = 0, roll = 0;  // radians
  double tx = 0, ty = 0, tz = 0;        // sphere radii
  double fov_scale = 1;
  int width = 256, height = 256;
  std::int64_t seq = 0;
  std::string encoding = "png";

  static constexpr int kMaxSide = 4096;

  nlohmann::json to_json() const {
    return {{"type", "pose"}, {"yaw", yaw},   {"pitch", pitch}, {"roll", roll},     {"tx", tx},         {"ty", ty},
            {"tz", tz},       {"fov_scale", fov_scale},         {"width", width},   {"height", height}, {"seq", seq},
            {"encoding", encoding}};
  }

  // Rejects structurally invalid messages; out-of-range values that have
  // an obvious nearest valid pose are clamped instead (see clamp()).
  static PoseMessage from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ProtocolError("message must be a JSON object");
    if (!j.contains("type") || j["type"] != "pose") throw ProtocolError("expected type \"pose\"");
    PoseMessage p;
    auto number = [&](const char* key, double& dst, bool required) {
      if (!j.contains(key)) {
        if (required) throw ProtocolError(std::string("missing field ") + key);
        return;
      }
      if (!j[key].is_number()) throw ProtocolError(std::string("field ") + key + " must be a number");
      dst = j[key].get<double>();
      if (!std::isfinite(dst)) throw ProtocolError(std::string("field ") + key + " must be finite");
    };
    auto integer = [&](const char* key, auto& dst, bool required) {
      if (!j.contains(key)) {
        if (required) throw ProtocolError(std::string("missing field ") + key);
        return;
      }
      if (!j[key].is_number_integer()) throw ProtocolError(std::string("field ") + key + " must be an integer");
      dst = j[key].get<std::remove_reference_t<decltype(dst)>>();
    };
    integer("seq", p.seq, true);
    number("yaw", p.yaw, true);
    number("pitch", p.pitch, true);
    number("roll", p.roll, true);
    number("tx", p.tx, false);
    number("ty", p.ty, false);
    number("tz", p.tz, false);
    number("fov_scale", p.fov_scale, false);
    integer("width", p.width, false);
    integer("height", p.height, false);
    if (p.width < 1 || p.height < 1 || p.width > kMaxSide || p.height > kMaxSide)
      throw ProtocolError("width and height must be in [1, 4096]");
    if (j.contains("encoding")) {
      if (!j["encoding"].is_string()) throw ProtocolError("field encoding must be a string");
      p.encoding = j["encoding"].get<std::string>();
      if (p.encoding != "png" && p.encoding != "jpeg") throw ProtocolError("encoding must be png or jpeg");
    }
    return p;
  }

  // Server-side clamps: |t| <= 0.99, fov_scale >= 1.
  void clamp() {
    const double n = std::sqrt(tx * tx + ty * ty + tz * tz);
    if (n > VirtualCamera::kMaxTranslation) {
      const double s = VirtualCamera::kMaxTranslation / n;
      tx *= s;
      ty *= s;
      tz *= s;
    }
    fov_scale = std::max(1.0, fov_scale);
  }
};

struct FrameMessage {
  std::int64_t seq = 0;
  int width = 0, height = 0;
  std::string encoding = "png";
  std::string payload;  // base64

  nlohmann::json to_json() const {
    return {{"type", "frame"}, {"seq", seq}, {"width", width}, {"height", height}, {"encoding", encoding},
            {"payload", payload}};
  }

  static FrameMessage from_json(const nlohmann::json& j) {
    if (!j.is_object() || j.value("type", "") != "frame") throw ProtocolError("expected type \"frame\"");
    FrameMessage f;
    f.seq = j.at("seq").get<std::int64_t>();
    f.width = j.at("width").get<int>();
    f.height = j.at("height").get<int>();
    f.encoding = j.at("encoding").get<std::string>();
    f.payload = j.at("payload").get<std::string>();
    return f;
  }
};

inline nlohmann::json error_message(std::optional<std::int64_t> seq, const std::string& reason) {
  return {{"type", "error"}, {"seq", seq ? nlohmann::json(*seq) : nlohmann::json(nullptr)}, {"reason", reason}};
}

// Camera for a pose message: the intrinsics of `reference` rescaled to the
// requested size, rotation yaw/pitch/roll applied on top of the reference
// frame's rotation, translation in world coordinates.
inline VirtualCamera camera_for_pose(const PoseMessage& p, const VirtualCamera& reference) {
  VirtualCamera c = reference.resized(p.width, p.height);
  c.rotation = reference.rotation * yaw_pitch_roll(p.yaw, p.pitch, p.roll);
  c.translation = {p.tx, p.ty, p.tz};
  c.fov_scale = p.fov_scale;
  return c;
}

namespace detail {

inline void send_all(int fd, const void* data, std::size_t n) {
  const auto* p = static_cast<const char*>(data);
  while (n > 0) {
    const ssize_t k = ::send(fd, p, n, MSG_NOSIGNAL);
    if (k < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(std::string("send failed: ") + std::strerror(errno));
    }
    p += k;
    n -= static_cast<std::size_t>(k);
  }
}

// False on orderly EOF before the first byte.
inline bool recv_all(int fd, void* data, std::size_t n) {
  auto* p = static_cast<char*>(data);
  std::size_t got = 0;
  while (got < n) {
    const ssize_t k = ::recv(fd, p + got, n - got, 0);
    if (k == 0) {
      if (got == 0) return false;
      throw ProtocolError("connection closed mid-message");
    }
    if (k < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(std::string("recv failed: ") + std::strerror(errno));
    }
    got += static_cast<std::size_t>(k);
  }
  return true;
}

inline std::string websocket_accept_key(const std::string& client_key) {
  const std::string s = client_key + "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(s.data()), s.size(), digest);
  return base64_encode(digest, SHA_DIGEST_LENGTH);
}

}  // namespace detail

inline constexpr std::size_t kMaxMessageBytes = 64u << 20;

// One duplex peer: length-prefixed JSON or WebSocket text frames. Reads
// happen on one thread, writes are serialized by a mutex.
class MessageChannel {
 public:
  explicit MessageChannel(int fd, bool websocket = false) : fd_(fd), websocket_(websocket) {}
  MessageChannel(const MessageChannel&) = delete;
  MessageChannel& operator=(const MessageChannel&) = delete;
  ~MessageChannel() { close(); }

  int fd() const { return fd_; }
  bool websocket() const { return websocket_; }

  // Server side: sniff the first bytes and complete a WebSocket upgrade
  // if the peer sent an HTTP request.
  void accept_handshake() {
    char head[4];
    const ssize_t k = ::recv(fd_, head, 4, MSG_PEEK | MSG_WAITALL);
    if (k == 4 && std::memcmp(head, "GET ", 4) == 0) {
      std::string req;
      char c;
      while (req.size() < 16384 && req.find("\r\n\r\n") == std::string::npos) {
        if (!detail::recv_all(fd_, &c, 1)) throw ProtocolError("connection closed during handshake");
        req.push_back(c);
      }
      std::string key;
      std::size_t pos = 0;
      while ((pos = req.find("\r\n", pos)) != std::string::npos) {
        pos += 2;
        const std::size_t colon = req.find(':', pos);
        const std::size_t eol = req.find("\r\n", pos);
        if (colon == std::string::npos || eol == std::string::npos || colon > eol) continue;
        std::string name = req.substr(pos, colon - pos);
        for (auto& ch : name) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        if (name == "sec-websocket-key") {
          key = req.substr(colon + 1, eol - colon - 1);
          key.erase(0, key.find_first_not_of(" \t"));
          key.erase(key.find_last_not_of(" \t") + 1);
        }
      }
      if (key.empty()) {
        const std::string resp = "HTTP/1.1 400 Bad Request\r\nContent-Length: 0\r\n\r\n";
        detail::send_all(fd_, resp.data(), resp.size());
        throw ProtocolError("HTTP request without a WebSocket key");
      }
      const std::string resp =
          "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
          "Sec-WebSocket-Accept: " +
          detail::websocket_accept_key(key) + "\r\n\r\n";
      detail::send_all(fd_, resp.data(), resp.size());
      websocket_ = true;
    }
  }

  void send(const nlohmann::json& msg) {
    const std::string body = msg.dump();
    std::lock_guard<std::mutex> lock(write_mu_);
    if (websocket_) {
      std::vector<std::uint8_t> h{0x81};
      const std::uint64_t n = body.size();
      if (n < 126) {
        h.push_back(static_cast<std::uint8_t>(n));
      } else if (n < 65536) {
        h.push_back(126);
        h.push_back(static_cast<std::uint8_t>(n >> 8));
        h.push_back(static_cast<std::uint8_t>(n));
      } else {
        h.push_back(127);
        for (int i = 7; i >= 0; --i) h.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
      }
      detail::send_all(fd_, h.data(), h.size());
    } else {
      const std::uint32_t n = static_cast<std::uint32_t>(body.size());
      const std::uint8_t h[4] = {static_cast<std::uint8_t>(n), static_cast<std::uint8_t>(n >> 8),
                                 static_cast<std::uint8_t>(n >> 16), static_cast<std::uint8_t>(n >> 24)};
      detail::send_all(fd_, h, 4);
    }
    detail::send_all(fd_, body.data(), body.size());
  }

  // Next raw message body; nullopt on orderly close. Framing errors throw
  // (the stream cannot be resynchronized); JSON is parsed by the caller.
  std::optional<std::string> receive_text() {
    if (!websocket_) {
      std::uint8_t h[4];
      if (!detail::recv_all(fd_, h, 4)) return std::nullopt;
      const std::uint32_t n = h[0] | h[1] << 8 | h[2] << 16 | std::uint32_t{h[3]} << 24;
      if (n > kMaxMessageBytes) throw ProtocolError("message length " + std::to_string(n) + " exceeds limit");
      std::string body(n, '\0');
      if (n > 0 && !detail::recv_all(fd_, body.data(), n)) throw ProtocolError("connection closed mid-message");
      return body;
    }
    std::string message;
    for (;;) {
      std::uint8_t h[2];
      if (!detail::recv_all(fd_, h, 2)) return std::nullopt;
      const bool fin = h[0] & 0x80;
      const int opcode = h[0] & 0x0f;
      const bool masked = h[1] & 0x80;
      std::uint64_t n = h[1] & 0x7f;
      if (n == 126) {
        std::uint8_t e[2];
        detail::recv_all(fd_, e, 2);
        n = std::uint64_t{e[0]} << 8 | e[1];
      } else if (n == 127) {
        std::uint8_t e[8];
        detail::recv_all(fd_, e, 8);
        n = 0;
        for (int i = 0; i < 8; ++i) n = n << 8 | e[i];
      }
      if (n > kMaxMessageBytes) throw ProtocolError("WebSocket frame exceeds limit");
      std::uint8_t key[4] = {0, 0, 0, 0};
      if (masked) detail::recv_all(fd_, key, 4);
      std::string payload(n, '\0');
      if (n > 0) detail::recv_all(fd_, payload.data(), n);
      for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<char>(payload[i] ^ key[i % 4]);
      if (opcode == 0x8) return std::nullopt;
      if (opcode == 0x9) {
        std::lock_guard<std::mutex> lock(write_mu_);
        std::vector<std::uint8_t> pong{0x8a, static_cast<std::uint8_t>(std::min<std::uint64_t>(n, 125))};
        detail::send_all(fd_, pong.data(), pong.size());
        detail::send_all(fd_, payload.data(), std::min<std::size_t>(payload.size(), 125));
        continue;
      }
      if (opcode == 0xa) continue;
      message += payload;
      if (message.size() > kMaxMessageBytes) throw ProtocolError("WebSocket message exceeds limit");
      if (fin) return message;
    }
  }

  void shutdown() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  void close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_;
  bool websocket_;
  std::mutex write_mu_;
};

// Client end of the length-prefixed transport.
inline std::unique_ptr<MessageChannel> connect_tcp(const std::string& host, int port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw ProtocolError("socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    throw ProtocolError("bad IPv4 address " + host);
  }
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    throw ProtocolError("connect to " + host + ":" + std::to_string(port) + " failed: " + std::strerror(errno));
  }
  const int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return std::make_unique<MessageChannel>(fd);
}

// Waits up to timeout_ms for a readable socket.
inline bool wait_readable(int fd, int timeout_ms) {
  pollfd p{fd, POLLIN, 0};
  return ::poll(&p, 1, timeout_ms) > 0;
}

struct ServiceOptions {
  int port = 0;            // 0 = ephemeral
  std::string bind = "127.0.0.1";
  int render_workers = 1;  // frames rendered concurrently across sessions
  int jpeg_quality = 85;
  RenderOptions render{};
  std::function<void(const PoseMessage&)> on_render;  // test/metrics hook, called before each render
};

struct ServiceStats {
  std::atomic<std::uint64_t> poses{0};
  std::atomic<std::uint64_t> frames{0};
  std::atomic<std::uint64_t> errors{0};
  std::atomic<std::uint64_t> sessions{0};
};

// Interactive render service over a read-only model snapshot.
class RenderService {
 public:
  RenderService(std::shared_ptr<const LightSphereModel<float>> model, VirtualCamera reference,
                ServiceOptions opt = {})
      : model_(std::move(model)),
        reference_(reference),
        opt_(std::move(opt)),
        slots_(std::max(1, opt_.render_workers)) {
    reference_.validate();
  }

  RenderService(const RenderService&) = delete;
  RenderService& operator=(const RenderService&) = delete;
  ~RenderService() { stop(); }

  void start() {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw ProtocolError("socket() failed");
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(opt_.port));
    if (::inet_pton(AF_INET, opt_.bind.c_str(), &addr.sin_addr) != 1) throw ProtocolError("bad bind address");
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(listen_fd_, 16) != 0) {
      const std::string why = std::strerror(errno);
      ::close(listen_fd_);
      listen_fd_ = -1;
      throw ProtocolError("cannot listen on port " + std::to_string(opt_.port) + ": " + why);
    }
    socklen_t len = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  int port() const { return port_; }
  const ServiceStats& stats() const { return stats_; }

  void stop() {
    if (!running_.exchange(false)) return;
    if (accept_thread_.joinable()) accept_thread_.join();
    ::close(listen_fd_);
    listen_fd_ = -1;
    std::lock_guard<std::mutex> lock(sessions_mu_);
    for (auto& s : sessions_) s->close();
    sessions_.clear();
  }

 private:
  class Session {
   public:
    Session(RenderService& svc, int fd) : svc_(svc), chan_(fd) {
      reader_ = std::thread([this] { read_loop(); });
      renderer_ = std::thread([this] { render_loop(); });
    }
    ~Session() { close(); }

    bool finished() const { return done_reading_ && done_rendering_; }

    void close() {
      {
        std::lock_guard<std::mutex> lock(mu_);
        closing_ = true;
      }
      cv_.notify_all();
      chan_.shutdown();
      if (reader_.joinable()) reader_.join();
      if (renderer_.joinable()) renderer_.join();
    }

   private:
    void read_loop() {
      try {
        chan_.accept_handshake();
        while (true) {
          auto text = chan_.receive_text();
          if (!text) break;
          handle(*text);
        }
      } catch (const std::exception&) {
        // Framing or socket error: the connection cannot continue.
      }
      {
        std::lock_guard<std::mutex> lock(mu_);
        closing_ = true;
      }
      cv_.notify_all();
      done_reading_ = true;
    }

    void handle(const std::string& text) {
      std::optional<std::int64_t> seq;
      try {
        const auto j = nlohmann::json::parse(text);
        if (j.is_object() && j.contains("seq") && j["seq"].is_number_integer()) seq = j["seq"].get<std::int64_t>();
        PoseMessage p = PoseMessage::from_json(j);
        p.clamp();
        ++svc_.stats_.poses;
        {
          std::lock_guard<std::mutex> lock(mu_);
          pending_ = p;  // latest wins
        }
        cv_.notify_one();
      } catch (const std::exception& e) {
        ++svc_.stats_.errors;
        send_quietly(error_message(seq, e.what()));
      }
    }

    void render_loop() {
      while (true) {
        PoseMessage p;
        {
          std::unique_lock<std::mutex> lock(mu_);
          cv_.wait(lock, [&] { return closing_ || pending_.has_value(); });
          if (!pending_) break;
          p = *pending_;
          pending_.reset();
        }
        try {
          send_quietly(svc_.render(p));
        } catch (const std::exception& e) {
          ++svc_.stats_.errors;
          send_quietly(error_message(p.seq, e.what()));
        }
        std::lock_guard<std::mutex> lock(mu_);
        if (closing_) break;
      }
      done_rendering_ = true;
    }

    void send_quietly(const nlohmann::json& msg) {
      try {
        chan_.send(msg);
      } catch (const std::exception&) {
        chan_.shutdown();
      }
    }

    RenderService& svc_;
    MessageChannel chan_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::optional<PoseMessage> pending_;
    bool closing_ = false;
    std::atomic<bool> done_reading_{false}, done_rendering_{false};
    std::thread reader_, renderer_;
  };

  nlohmann::json render(const PoseMessage& p) {
    if (opt_.on_render) opt_.on_render(p);
    const VirtualCamera cam = camera_for_pose(p, reference_);
    Image img;
    {
      slots_.acquire();
      struct Release {
        std::counting_semaphore<>& s;
        ~Release() { s.release(); }
      } release{slots_};
      img = render_view(*model_, cam, opt_.render);
    }
    const std::vector<std::uint8_t> bytes = p.encoding == "jpeg" ? encode_jpeg(img, opt_.jpeg_quality) : encode_png(img, 8);
    FrameMessage f{p.seq, img.width, img.height, p.encoding, base64_encode(bytes.data(), bytes.size())};
    ++stats_.frames;
    return f.to_json();
  }

  void accept_loop() {
    while (running_) {
      if (!wait_readable(listen_fd_, 50)) {
        reap();
        continue;
      }
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) continue;
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      ++stats_.sessions;
      std::lock_guard<std::mutex> lock(sessions_mu_);
      sessions_.push_back(std::make_unique<Session>(*this, fd));
    }
  }

  void reap() {
    std::lock_guard<std::mutex> lock(sessions_mu_);
    sessions_.remove_if([](const std::unique_ptr<Session>& s) { return s->finished(); });
  }

  std::shared_ptr<const LightSphereModel<float>> model_;
  VirtualCamera reference_;
  ServiceOptions opt_;
  std::counting_semaphore<> slots_;
  ServiceStats stats_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> running_{false};
  std::thread accept_thread_;
  std::mutex sessions_mu_;
  std::list<std::unique_ptr<Session>> sessions_;
};

}  // namespace nls
