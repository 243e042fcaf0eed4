#pragma once

// Binary checkpoints.
//
//   bytes 0-3  "CNF1"
//   u32        version (1)
//   u8         kind: 0 flow, 1 conditional flow, 2 pinned flow, 3 preconditioned
//   body       one flow record per sub-flow (+ pinned condition vectors)
//
// Flow record: dim, cond_dim, coupling count, clamp, config seed, closed flag,
// hidden widths, both standardizers, then one descriptor per layer (type byte,
// permutation seed, hidden widths) and the parameter payload in ParamStore
// order. Integers are u64 and reals f64, all little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>

#include "cnf/errors.hpp"
#include "cnf/flows.hpp"
#include "cnf/transfer.hpp"

namespace cnf::harness {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ModelKind : std::uint8_t { flow = 0, conditional = 1, pinned = 2, preconditioned = 3 };

class CheckpointError : public IoError {
 public:
  enum class Kind { magic, version, truncated, dim_mismatch, kind_mismatch, corrupt };

  CheckpointError(Kind kind, const std::string& what) : IoError("checkpoint: " + what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

using Model = std::variant<Flow, ConditionalFlow, PinnedFlow, PreconditionedFlow>;

namespace detail {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { out_.append(s); }
  void vec(const Vector& v) {
    u64(static_cast<std::uint64_t>(v.size()));
    for (double x : v) f64(x);
  }
  void sizes(const std::vector<std::size_t>& v) {
    u64(v.size());
    for (auto x : v) u64(x);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  /// Length prefix, sanity-checked against the bytes left.
  std::size_t count(std::size_t elem_bytes) {
    const auto n = u64();
    if (n > (in_.size() - pos_) / elem_bytes) throw CheckpointError(CheckpointError::Kind::truncated, "length runs past end of file");
    return static_cast<std::size_t>(n);
  }
  Vector vec() {
    const auto n = count(8);
    Vector v(static_cast<Eigen::Index>(n));
    for (auto& x : v) x = f64();
    return v;
  }
  std::vector<std::size_t> sizes() {
    std::vector<std::size_t> v(count(8));
    for (auto& x : v) x = static_cast<std::size_t>(u64());
    return v;
  }
  std::string_view raw(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const noexcept { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw CheckpointError(CheckpointError::Kind::truncated, "unexpected end of file");
  }

  std::string_view in_;
  std::size_t pos_ = 0;
};

inline void write_standardizer(Writer& w, const Standardizer& s) {
  w.u8(s.identity() ? 0 : 1);
  if (!s.identity()) {
    w.vec(s.shift);
    w.vec(s.scale);
  }
}

inline Standardizer read_standardizer(Reader& r) {
  const auto flag = r.u8();
  if (flag > 1) throw CheckpointError(CheckpointError::Kind::corrupt, "bad standardizer flag");
  Standardizer s;
  if (flag) {
    s.shift = r.vec();
    s.scale = r.vec();
  }
  return s;
}

inline void write_flow(Writer& w, const Flow& f) {
  const auto& c = f.config();
  w.u64(c.dim);
  w.u64(c.cond_dim);
  w.u64(c.n_layers);
  w.f64(c.clamp);
  w.u64(c.seed);
  w.u8(c.closed ? 1 : 0);
  w.sizes(c.hidden_widths);
  write_standardizer(w, f.input_standardizer());
  write_standardizer(w, f.cond_standardizer());
  w.u64(f.layers().size());
  for (const auto& l : f.layers()) {
    w.u8(static_cast<std::uint8_t>(l.kind));
    w.u64(l.seed);
    w.sizes(l.kind == LayerKind::coupling ? c.hidden_widths : std::vector<std::size_t>{});
  }
  const auto vals = f.params().values();
  w.u64(vals.size());
  for (double v : vals) w.f64(v);
}

inline Flow read_flow(Reader& r) {
  FlowConfig c;
  c.dim = static_cast<std::size_t>(r.u64());
  c.cond_dim = static_cast<std::size_t>(r.u64());
  c.n_layers = static_cast<std::size_t>(r.u64());
  c.clamp = r.f64();
  c.seed = r.u64();
  const auto closed = r.u8();
  if (closed > 1) throw CheckpointError(CheckpointError::Kind::corrupt, "bad closed flag");
  c.closed = closed == 1;
  c.hidden_widths = r.sizes();
  auto in_norm = read_standardizer(r);
  auto cond_norm = read_standardizer(r);

  // Sanity bounds before allocating anything from header values.
  if (c.dim == 0 || c.dim > (1u << 20) || c.cond_dim > (1u << 20) || c.n_layers > 4096)
    throw CheckpointError(CheckpointError::Kind::corrupt, "implausible flow header");
  for (auto h : c.hidden_widths)
    if (h == 0 || h > (1u << 16)) throw CheckpointError(CheckpointError::Kind::corrupt, "implausible hidden width");

  const auto n_layers = r.count(17);
  std::vector<std::uint8_t> kinds(n_layers);
  std::vector<std::uint64_t> shuffle_seeds;
  for (std::size_t i = 0; i < n_layers; ++i) {
    kinds[i] = r.u8();
    const auto seed = r.u64();
    const auto widths = r.sizes();
    if (kinds[i] > static_cast<std::uint8_t>(LayerKind::closing))
      throw CheckpointError(CheckpointError::Kind::corrupt, "unknown layer type " + std::to_string(kinds[i]));
    if (kinds[i] == static_cast<std::uint8_t>(LayerKind::shuffle)) shuffle_seeds.push_back(seed);
    if (kinds[i] == static_cast<std::uint8_t>(LayerKind::coupling) && widths != c.hidden_widths)
      throw CheckpointError(CheckpointError::Kind::corrupt, "layer widths disagree with the header");
  }

  Flow f;
  try {
    f = Flow::skeleton(c, shuffle_seeds);
    f.set_standardization(std::move(in_norm), std::move(cond_norm));
  } catch (const Error& e) {
    throw CheckpointError(CheckpointError::Kind::corrupt, e.what());
  }
  if (f.layers().size() != n_layers) throw CheckpointError(CheckpointError::Kind::corrupt, "layer schedule mismatch");
  for (std::size_t i = 0; i < n_layers; ++i)
    if (static_cast<std::uint8_t>(f.layers()[i].kind) != kinds[i])
      throw CheckpointError(CheckpointError::Kind::corrupt, "layer " + std::to_string(i) + " has the wrong type");

  const auto n_params = r.count(8);
  if (n_params != f.params().size())
    throw CheckpointError(CheckpointError::Kind::dim_mismatch, "payload holds " + std::to_string(n_params) +
                                                                   " parameters, schedule needs " +
                                                                   std::to_string(f.params().size()));
  for (double& v : f.params().values()) v = r.f64();
  return f;
}

}  // namespace detail

inline std::string encode_checkpoint(const Model& m) {
  detail::Writer w;
  w.raw("CNF1");
  w.u32(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(m.index()));
  std::visit(
      [&](const auto& model) {
        using T = std::decay_t<decltype(model)>;
        if constexpr (std::is_same_v<T, Flow>) {
          detail::write_flow(w, model);
        } else if constexpr (std::is_same_v<T, ConditionalFlow>) {
          detail::write_flow(w, model.flow_y);
          detail::write_flow(w, model.flow_x);
        } else if constexpr (std::is_same_v<T, PinnedFlow>) {
          detail::write_flow(w, model.flow());
          w.vec(model.cond());
        } else {
          detail::write_flow(w, model.frozen());
          w.vec(model.cond());
          detail::write_flow(w, model.outer());
        }
      },
      m);
  return w.take();
}

inline Model decode_checkpoint(std::string_view bytes) {
  using K = CheckpointError::Kind;
  if (bytes.size() < 4 || bytes.substr(0, 4) != "CNF1") throw CheckpointError(K::magic, "bad magic");
  detail::Reader r(bytes.substr(4));
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError(K::version, "unsupported version " + std::to_string(version));
  const auto kind = r.u8();
  Model m;
  try {
    switch (kind) {
      case 0:
        m = detail::read_flow(r);
        break;
      case 1: {
        ConditionalFlow t;
        t.flow_y = detail::read_flow(r);
        t.flow_x = detail::read_flow(r);
        if (t.flow_y.cond_dim() != 0 || t.flow_x.cond_dim() != t.ny())
          throw CheckpointError(K::dim_mismatch, "conditional sub-flows disagree in dimension");
        m = std::move(t);
        break;
      }
      case 2: {
        Flow f = detail::read_flow(r);
        Vector c = r.vec();
        if (static_cast<std::size_t>(c.size()) != f.cond_dim())
          throw CheckpointError(K::dim_mismatch, "pinned condition has the wrong dimension");
        m = PinnedFlow(std::move(f), std::move(c));
        break;
      }
      case 3: {
        Flow frozen = detail::read_flow(r);
        Vector c = r.vec();
        Flow outer = detail::read_flow(r);
        if (static_cast<std::size_t>(c.size()) != frozen.cond_dim() || outer.dim() != frozen.dim() ||
            outer.cond_dim() != 0)
          throw CheckpointError(K::dim_mismatch, "preconditioned stages disagree in dimension");
        m = PreconditionedFlow(std::make_shared<const Flow>(std::move(frozen)), std::move(c), std::move(outer));
        break;
      }
      default:
        throw CheckpointError(K::corrupt, "unknown model kind " + std::to_string(kind));
    }
  } catch (const CheckpointError&) {
    throw;
  } catch (const Error& e) {
    throw CheckpointError(K::corrupt, e.what());
  }
  if (!r.done()) throw CheckpointError(K::corrupt, "trailing bytes");
  return m;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path + "'");
}

inline void save_checkpoint(const std::string& path, const Model& m) { write_file(path, encode_checkpoint(m)); }

inline Model load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

/// Loads and checks the stored model kind.
template <class T>
T load_checkpoint_as(const std::string& path) {
  Model m = load_checkpoint(path);
  if (auto* p = std::get_if<T>(&m)) return std::move(*p);
  throw CheckpointError(CheckpointError::Kind::kind_mismatch, "'" + path + "' holds a different model kind");
}

/// Loads T and checks it against the expected problem dimensions.
inline ConditionalFlow load_conditional(const std::string& path, std::size_t nx, std::size_t ny) {
  auto t = load_checkpoint_as<ConditionalFlow>(path);
  if (t.nx() != nx || t.ny() != ny)
    throw CheckpointError(CheckpointError::Kind::dim_mismatch,
                          "checkpoint is " + std::to_string(t.nx()) + "x" + std::to_string(t.ny()) + ", config wants " +
                              std::to_string(nx) + "x" + std::to_string(ny));
  return t;
}

/// FNV-1a 64 of a byte string, as 16 hex digits.
inline std::string content_hash(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace cnf::harness
