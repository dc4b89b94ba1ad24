// Copyright 2026 The SplitFT Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Wire messages and their framing.
//
// Frame:   'S' 'F' 'T' '1' | version u8 | type u8 | payload length u32 LE | payload
// Matrix:  rows u32 LE | cols u32 LE | rows·cols floats LE
//
// The version byte selects the float width: 1 = f32 (normal), 2 = f64
// (lossless mode). Message bodies follow their struct field order; lists are
// a u32 count followed by the elements.

#pragma once

#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <bit>
#include <cerrno>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "splitft/lora.hpp"
#include "splitft/numkit.hpp"

namespace splitft {

struct SmashedData {
  std::uint32_t client_id = 0;
  std::uint32_t round = 0;
  Mat activations;
  friend bool operator==(const SmashedData&, const SmashedData&) = default;
};

struct SmashedGrad {
  std::uint32_t client_id = 0;
  std::uint32_t round = 0;
  Mat grad;
  friend bool operator==(const SmashedGrad&, const SmashedGrad&) = default;
};

struct AdapterDeltaSet {
  std::uint32_t client_id = 0;
  std::vector<AdapterDelta> deltas;
  friend bool operator==(const AdapterDeltaSet&, const AdapterDeltaSet&) = default;
};

struct AggregatedAdapters {
  std::vector<AdapterDelta> deltas;
  friend bool operator==(const AggregatedAdapters&, const AggregatedAdapters&) = default;
};

/// New client depth plus the full state of every adapter in the new span
/// that the client cannot reconstruct on its own (layers it acquires, cut
/// layers whose rank changed, layers the server trained meanwhile).
struct LayerAssignment {
  std::uint32_t client_id = 0;
  std::uint32_t l_new = 0;
  std::vector<LoraAdapter> adapters;
  friend bool operator==(const LayerAssignment&, const LayerAssignment&) = default;
};

using ProtocolMessage = std::variant<SmashedData, SmashedGrad, AdapterDeltaSet, AggregatedAdapters, LayerAssignment>;

enum class MsgType : std::uint8_t {
  kSmashedData = 1,
  kSmashedGrad = 2,
  kAdapterDelta = 3,
  kAggregatedAdapters = 4,
  kLayerAssignment = 5,
};

enum class WirePrecision : std::uint8_t { kFloat32 = 1, kFloat64 = 2 };

inline constexpr std::uint8_t kMagic[4] = {0x53, 0x46, 0x54, 0x31};  // "SFT1"
inline constexpr std::size_t kFrameHeaderSize = 10;

inline MsgType type_of(const ProtocolMessage& m) {
  return static_cast<MsgType>(m.index() + 1);
}

inline std::string_view type_name(MsgType t) {
  switch (t) {
    case MsgType::kSmashedData: return "SmashedData";
    case MsgType::kSmashedGrad: return "SmashedGrad";
    case MsgType::kAdapterDelta: return "AdapterDelta";
    case MsgType::kAggregatedAdapters: return "AggregatedAdapters";
    case MsgType::kLayerAssignment: return "LayerAssignment";
  }
  return "Unknown";
}

namespace detail {

class Writer {
 public:
  explicit Writer(WirePrecision p) : precision_(p) {}

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void size(std::size_t v) {
    if (v > 0xFFFFFFFFull) throw CodecError("value does not fit in u32");
    u32(static_cast<std::uint32_t>(v));
  }
  void mat(const Mat& m) {
    size(m.rows());
    size(m.cols());
    for (double v : m.data()) {
      if (precision_ == WirePrecision::kFloat32) {
        u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        u64(std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  void delta(const AdapterDelta& d) {
    size(d.layer_index);
    mat(d.da);
    mat(d.db);
    size(d.rank);
  }
  void adapter(const LoraAdapter& a) {
    size(a.layer_index);
    mat(a.a);
    mat(a.b);
    size(a.rank);
  }

  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  WirePrecision precision_;
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, WirePrecision p) : bytes_(bytes), precision_(p) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  Mat mat() {
    const std::size_t rows = u32();
    const std::size_t cols = u32();
    const std::size_t width = precision_ == WirePrecision::kFloat32 ? 4 : 8;
    if (cols != 0 && rows > (bytes_.size() - pos_) / width / cols) throw CodecError("matrix exceeds payload");
    Mat m(rows, cols);
    for (double& v : m.data()) {
      v = precision_ == WirePrecision::kFloat32 ? static_cast<double>(std::bit_cast<float>(u32()))
                                                : std::bit_cast<double>(u64());
    }
    return m;
  }
  AdapterDelta delta() {
    AdapterDelta d;
    d.layer_index = u32();
    d.da = mat();
    d.db = mat();
    d.rank = u32();
    return d;
  }
  LoraAdapter adapter() {
    LoraAdapter a;
    a.layer_index = u32();
    a.a = mat();
    a.b = mat();
    a.rank = u32();
    return a;
  }
  template <typename F>
  auto list(F&& element) {
    const std::size_t n = u32();
    std::vector<decltype(element())> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(element());
    return out;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CodecError("truncated payload");
  }
  std::span<const std::uint8_t> bytes_;
  WirePrecision precision_;
  std::size_t pos_ = 0;
};

inline std::uint32_t read_u32_le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

struct FrameHeader {
  WirePrecision precision;
  MsgType type;
  std::uint32_t payload_length;
};

/// Validates and parses the fixed 10-byte header.
inline FrameHeader parse_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kFrameHeaderSize) throw CodecError("truncated frame header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CodecError("bad frame magic");
  const std::uint8_t version = bytes[4];
  if (version != 1 && version != 2) throw CodecError("unknown frame version " + std::to_string(version));
  const std::uint8_t type = bytes[5];
  if (type < 1 || type > 5) throw CodecError("unknown message type " + std::to_string(type));
  return {static_cast<WirePrecision>(version), static_cast<MsgType>(type), detail::read_u32_le(bytes.data() + 6)};
}

inline std::vector<std::uint8_t> encode(const ProtocolMessage& msg,
                                        WirePrecision precision = WirePrecision::kFloat32) {
  detail::Writer w(precision);
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, SmashedData>) {
          w.u32(m.client_id);
          w.u32(m.round);
          w.mat(m.activations);
        } else if constexpr (std::is_same_v<T, SmashedGrad>) {
          w.u32(m.client_id);
          w.u32(m.round);
          w.mat(m.grad);
        } else if constexpr (std::is_same_v<T, AdapterDeltaSet>) {
          w.u32(m.client_id);
          w.size(m.deltas.size());
          for (const auto& d : m.deltas) w.delta(d);
        } else if constexpr (std::is_same_v<T, AggregatedAdapters>) {
          w.size(m.deltas.size());
          for (const auto& d : m.deltas) w.delta(d);
        } else {
          w.u32(m.client_id);
          w.u32(m.l_new);
          w.size(m.adapters.size());
          for (const auto& a : m.adapters) w.adapter(a);
        }
      },
      msg);
  const std::vector<std::uint8_t>& payload = w.bytes();
  if (payload.size() > 0xFFFFFFFFull) throw CodecError("payload too large");
  std::vector<std::uint8_t> frame(kMagic, kMagic + 4);
  frame.push_back(static_cast<std::uint8_t>(precision));
  frame.push_back(static_cast<std::uint8_t>(type_of(msg)));
  const auto len = static_cast<std::uint32_t>(payload.size());
  for (int i = 0; i < 4; ++i) frame.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
  frame.insert(frame.end(), payload.begin(), payload.end());
  return frame;
}

/// Decodes exactly one frame; trailing or missing bytes are a CodecError.
inline ProtocolMessage decode(std::span<const std::uint8_t> frame) {
  const FrameHeader h = parse_header(frame);
  if (frame.size() - kFrameHeaderSize != h.payload_length) {
    throw CodecError("frame length " + std::to_string(frame.size()) + " disagrees with header payload length " +
                     std::to_string(h.payload_length));
  }
  detail::Reader r(frame.subspan(kFrameHeaderSize), h.precision);
  ProtocolMessage out;
  switch (h.type) {
    case MsgType::kSmashedData: {
      SmashedData m;
      m.client_id = r.u32();
      m.round = r.u32();
      m.activations = r.mat();
      out = std::move(m);
      break;
    }
    case MsgType::kSmashedGrad: {
      SmashedGrad m;
      m.client_id = r.u32();
      m.round = r.u32();
      m.grad = r.mat();
      out = std::move(m);
      break;
    }
    case MsgType::kAdapterDelta: {
      AdapterDeltaSet m;
      m.client_id = r.u32();
      m.deltas = r.list([&] { return r.delta(); });
      out = std::move(m);
      break;
    }
    case MsgType::kAggregatedAdapters: {
      AggregatedAdapters m;
      m.deltas = r.list([&] { return r.delta(); });
      out = std::move(m);
      break;
    }
    case MsgType::kLayerAssignment: {
      LayerAssignment m;
      m.client_id = r.u32();
      m.l_new = r.u32();
      m.adapters = r.list([&] { return r.adapter(); });
      out = std::move(m);
      break;
    }
  }
  if (!r.done()) throw CodecError("trailing bytes in payload");
  return out;
}

/// Splits a byte buffer holding back-to-back frames.
inline std::vector<ProtocolMessage> decode_stream(std::span<const std::uint8_t> bytes) {
  std::vector<ProtocolMessage> out;
  while (!bytes.empty()) {
    const FrameHeader h = parse_header(bytes);
    const std::size_t total = kFrameHeaderSize + h.payload_length;
    if (bytes.size() < total) throw CodecError("truncated frame");
    out.push_back(decode(bytes.first(total)));
    bytes = bytes.subspan(total);
  }
  return out;
}

/// The message as the receiver will see it after the wire.
template <typename T>
T over_wire(const T& msg, WirePrecision precision) {
  return std::get<T>(decode(encode(ProtocolMessage(msg), precision)));
}

// ---------------------------------------------------------------------------
// Carriers move whole frames between one sender and one receiver, FIFO.

class Carrier {
 public:
  virtual ~Carrier() = default;
  virtual void send_frame(std::vector<std::uint8_t> frame) = 0;
  virtual std::vector<std::uint8_t> recv_frame() = 0;
  virtual void close() = 0;
};

class MemoryCarrier final : public Carrier {
 public:
  void send_frame(std::vector<std::uint8_t> frame) override {
    {
      std::lock_guard lock(mu_);
      if (closed_) throw TransportError("send on closed channel");
      queue_.push_back(std::move(frame));
    }
    cv_.notify_one();
  }

  std::vector<std::uint8_t> recv_frame() override {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return closed_ || !queue_.empty(); });
    if (queue_.empty()) throw TransportError("recv on closed channel");
    auto frame = std::move(queue_.front());
    queue_.pop_front();
    return frame;
  }

  void close() override {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::vector<std::uint8_t>> queue_;
  bool closed_ = false;
};

/// Frames over a connected AF_UNIX stream socket pair. The receiver reads
/// the header, then exactly the advertised payload. A single in-flight
/// frame must fit the kernel socket buffer when sender and receiver share a
/// thread.
class StreamCarrier final : public Carrier {
 public:
  StreamCarrier() {
    int fds[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM, 0, fds) != 0) {
      throw TransportError(std::string("socketpair: ") + std::strerror(errno));
    }
    tx_ = fds[0];
    rx_ = fds[1];
    const int buf = 8 << 20;
    ::setsockopt(tx_, SOL_SOCKET, SO_SNDBUF, &buf, sizeof buf);
    ::setsockopt(rx_, SOL_SOCKET, SO_RCVBUF, &buf, sizeof buf);
  }
  ~StreamCarrier() override {
    if (tx_ >= 0) ::close(tx_);
    if (rx_ >= 0) ::close(rx_);
  }
  StreamCarrier(const StreamCarrier&) = delete;
  StreamCarrier& operator=(const StreamCarrier&) = delete;

  void send_frame(std::vector<std::uint8_t> frame) override { write_raw(frame); }

  /// Raw bytes, bypassing framing. Lets tests inject partial frames.
  void write_raw(std::span<const std::uint8_t> bytes) {
    std::lock_guard lock(send_mu_);
    if (tx_ < 0) throw TransportError("send on closed stream");
    std::size_t off = 0;
    while (off < bytes.size()) {
      const ssize_t n = ::send(tx_, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("send: ") + std::strerror(errno));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  std::vector<std::uint8_t> recv_frame() override {
    std::vector<std::uint8_t> frame(kFrameHeaderSize);
    const std::size_t got = read_exact(frame.data(), kFrameHeaderSize);
    if (got == 0) throw TransportError("recv on closed stream");
    if (got < kFrameHeaderSize) throw CodecError("truncated frame header on stream");
    const FrameHeader h = parse_header(frame);
    frame.resize(kFrameHeaderSize + h.payload_length);
    if (read_exact(frame.data() + kFrameHeaderSize, h.payload_length) < h.payload_length) {
      throw CodecError("truncated frame payload on stream");
    }
    return frame;
  }

  /// Half-closes the sending side; the receiver sees end of stream.
  void close() override {
    std::lock_guard lock(send_mu_);
    if (tx_ >= 0) {
      ::close(tx_);
      tx_ = -1;
    }
  }

 private:
  std::size_t read_exact(std::uint8_t* dst, std::size_t n) {
    std::size_t off = 0;
    while (off < n) {
      const ssize_t got = ::recv(rx_, dst + off, n - off, 0);
      if (got < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("recv: ") + std::strerror(errno));
      }
      if (got == 0) break;
      off += static_cast<std::size_t>(got);
    }
    return off;
  }

  int tx_ = -1;
  int rx_ = -1;
  std::mutex send_mu_;
};

enum class CarrierKind { kMemory, kStream };

inline std::unique_ptr<Carrier> make_carrier(CarrierKind kind) {
  if (kind == CarrierKind::kStream) return std::make_unique<StreamCarrier>();
  return std::make_unique<MemoryCarrier>();
}

/// A one-way typed channel: encodes on send, decodes on receive and counts
/// every frame byte that crosses it.
class Channel {
 public:
  Channel(std::unique_ptr<Carrier> carrier, WirePrecision precision)
      : carrier_(std::move(carrier)), precision_(precision) {}

  /// Returns the frame length in bytes.
  std::size_t send(const ProtocolMessage& msg) {
    std::vector<std::uint8_t> frame = encode(msg, precision_);
    const std::size_t n = frame.size();
    carrier_->send_frame(std::move(frame));
    bytes_.fetch_add(n, std::memory_order_relaxed);
    frames_.fetch_add(1, std::memory_order_relaxed);
    return n;
  }

  ProtocolMessage recv() { return decode(carrier_->recv_frame()); }

  void close() { carrier_->close(); }

  std::uint64_t bytes() const { return bytes_.load(std::memory_order_relaxed); }
  std::uint64_t frames() const { return frames_.load(std::memory_order_relaxed); }
  WirePrecision precision() const { return precision_; }
  Carrier& carrier() { return *carrier_; }

 private:
  std::unique_ptr<Carrier> carrier_;
  WirePrecision precision_;
  std::atomic<std::uint64_t> bytes_{0};
  std::atomic<std::uint64_t> frames_{0};
};

}  // namespace splitft
