#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "surfseg/nn_ops.hpp"

namespace surfseg {

enum class ModelKind : std::uint8_t { classifier = 0, segmenter = 1 };

// (c, d, n, N) parameterization shared by the classifier and the segmenter.
struct ModelConfig {
  int channels = 8;          // c: channels in every layer
  int levels = 2;            // d: number of pooling levels
  int stage_repeats = 1;     // n: conv-bn-relu stages per residual block
  int blocks_per_level = 1;  // N: residual blocks per level
  int num_classes = 8;
  int input_h = 64;
  int input_w = 64;

  int depth() const { return levels * stage_repeats * blocks_per_level + 1; }

  void validate() const {
    if (channels < 1 || levels < 1 || stage_repeats < 1 || blocks_per_level < 1 ||
        num_classes < 1 || input_h < 1 || input_w < 1) {
      throw std::invalid_argument("model config: all fields must be >= 1");
    }
    const int div = 1 << levels;
    if (input_h % div != 0 || input_w % div != 0) {
      throw std::invalid_argument("model config: input size not divisible by 2^levels");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct ResBlockParams {
  std::vector<ConvBnUnit<T>> stages;  // n entries
};

template <typename T>
struct LevelParams {
  std::vector<ResBlockParams<T>> blocks;  // N entries
};

template <typename T>
struct Model {
  ModelConfig config;
  ModelKind kind = ModelKind::classifier;

  ConvBnUnit<T> stem;                 // 1 -> c
  std::vector<LevelParams<T>> down;   // d levels (descending path)
  std::vector<LevelParams<T>> up;     // d levels (ascending path, segmenter only)
  Conv2dParams<T> head_conv;          // c -> 1 (segmenter only)
  LinearParams<T> fc;                 // c -> num_classes (classifier only)

  // Canonical parameter directory: stable names, fixed order, includes
  // batch-norm running statistics. Serialization and the optimizer rely on
  // this order being the construction order.
  std::vector<std::pair<std::string, Tensor<T>>> named_tensors() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    auto push_unit = [&out](const std::string& prefix, ConvBnUnit<T>& u) {
      out.emplace_back(prefix + ".conv.weight", u.conv.weight);
      out.emplace_back(prefix + ".conv.bias", u.conv.bias);
      out.emplace_back(prefix + ".bn.gamma", u.bn.gamma);
      out.emplace_back(prefix + ".bn.beta", u.bn.beta);
      out.emplace_back(prefix + ".bn.running_mean", u.bn.running_mean);
      out.emplace_back(prefix + ".bn.running_var", u.bn.running_var);
    };
    push_unit("stem", stem);
    for (std::size_t l = 0; l < down.size(); ++l) {
      for (std::size_t b = 0; b < down[l].blocks.size(); ++b) {
        for (std::size_t s = 0; s < down[l].blocks[b].stages.size(); ++s) {
          push_unit("down" + std::to_string(l) + ".block" + std::to_string(b) + ".stage" +
                        std::to_string(s),
                    down[l].blocks[b].stages[s]);
        }
      }
    }
    if (kind == ModelKind::segmenter) {
      // ascending levels in application order: bottom (highest index) first
      for (std::size_t k = 0; k < up.size(); ++k) {
        const std::size_t l = up.size() - 1 - k;
        for (std::size_t b = 0; b < up[l].blocks.size(); ++b) {
          for (std::size_t s = 0; s < up[l].blocks[b].stages.size(); ++s) {
            push_unit("up" + std::to_string(l) + ".block" + std::to_string(b) + ".stage" +
                          std::to_string(s),
                      up[l].blocks[b].stages[s]);
          }
        }
      }
      out.emplace_back("head.conv.weight", head_conv.weight);
      out.emplace_back("head.conv.bias", head_conv.bias);
    } else {
      out.emplace_back("fc.weight", fc.weight);
      out.emplace_back("fc.bias", fc.bias);
    }
    return out;
  }

  std::vector<Tensor<T>> trainable_params() {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_tensors()) {
      if (t.requires_grad()) out.push_back(t);
    }
    return out;
  }

  std::size_t trainable_param_count() {
    std::size_t n = 0;
    for (Tensor<T>& t : trainable_params()) n += t.size();
    return n;
  }

  int conv_layer_count() const {
    int count = 1;  // stem
    for (const auto& level : down)
      for (const auto& block : level.blocks) count += static_cast<int>(block.stages.size());
    if (kind == ModelKind::segmenter) {
      for (const auto& level : up)
        for (const auto& block : level.blocks) count += static_cast<int>(block.stages.size());
      count += 1;  // head
    }
    return count;
  }
};

namespace detail {

template <typename T>
LevelParams<T> make_level(int channels, int blocks, int stages, SplitMix64& rng) {
  LevelParams<T> level;
  level.blocks.resize(blocks);
  for (int b = 0; b < blocks; ++b) {
    for (int s = 0; s < stages; ++s) {
      level.blocks[b].stages.push_back(
          ConvBnUnit<T>{make_conv3x3<T>(channels, channels, rng), make_batch_norm<T>(channels)});
    }
  }
  return level;
}

}  // namespace detail

template <typename T>
Model<T> build_classifier(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  SplitMix64 rng(derive_seed(seed, 0xC1A55));
  Model<T> m;
  m.config = config;
  m.kind = ModelKind::classifier;
  m.stem = ConvBnUnit<T>{make_conv3x3<T>(1, config.channels, rng),
                         make_batch_norm<T>(config.channels)};
  for (int l = 0; l < config.levels; ++l) {
    m.down.push_back(detail::make_level<T>(config.channels, config.blocks_per_level,
                                           config.stage_repeats, rng));
  }
  m.fc = make_linear<T>(config.channels, config.num_classes, rng);
  return m;
}

template <typename T>
Model<T> build_segmenter(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  if (std::min(config.input_h, config.input_w) < (2 << config.levels)) {
    throw std::invalid_argument(
        "model config: bottom resolution below 2, input too small for this many levels");
  }
  SplitMix64 rng(derive_seed(seed, 0x5E6));
  Model<T> m;
  m.config = config;
  m.kind = ModelKind::segmenter;
  m.stem = ConvBnUnit<T>{make_conv3x3<T>(1, config.channels, rng),
                         make_batch_norm<T>(config.channels)};
  for (int l = 0; l < config.levels; ++l) {
    m.down.push_back(detail::make_level<T>(config.channels, config.blocks_per_level,
                                           config.stage_repeats, rng));
  }
  m.up.resize(config.levels);
  for (int l = config.levels - 1; l >= 0; --l) {  // application order: bottom first
    m.up[l] = detail::make_level<T>(config.channels, config.blocks_per_level,
                                    config.stage_repeats, rng);
  }
  m.head_conv = make_conv3x3<T>(config.channels, 1, rng);
  return m;
}

namespace detail {

template <typename T>
void check_model_input(const Model<T>& m, const Tensor<T>& x, const char* who) {
  require_featuremap(x, who);
  if (x.dim(1) != 1) {
    throw std::invalid_argument(std::string(who) + ": expected a single-channel input");
  }
  const int div = 1 << m.config.levels;
  if (x.dim(2) % div != 0 || x.dim(3) % div != 0) {
    throw std::invalid_argument(std::string(who) +
                                ": input size not divisible by 2^levels");
  }
}

}  // namespace detail

// Descending trunk -> global average pooling -> linear softmax.
template <typename T>
Tensor<T> classifier_forward(Model<T>& m, const Tensor<T>& x, Mode mode,
                             bool update_running = true) {
  detail::check_model_input(m, x, "classifier_forward");
  Tensor<T> h = conv_bn_relu(x, m.stem, mode, update_running);
  for (auto& level : m.down) {
    for (auto& block : level.blocks) h = residual_block(h, block.stages, mode, update_running);
    h = maxpool2x2(h);
  }
  return linear_softmax(global_avg_pool(h), m.fc);
}

// Descending trunk with per-level skips, symmetric ascending path merging by
// summation, head conv + sigmoid. Output shape equals input shape.
template <typename T>
Tensor<T> segmenter_forward(Model<T>& m, const Tensor<T>& x, Mode mode,
                            bool update_running = true) {
  detail::check_model_input(m, x, "segmenter_forward");
  if (m.kind != ModelKind::segmenter) {
    throw std::invalid_argument("segmenter_forward: model is not a segmenter");
  }
  Tensor<T> h = conv_bn_relu(x, m.stem, mode, update_running);
  std::vector<Tensor<T>> skips;
  skips.reserve(m.down.size());
  for (auto& level : m.down) {
    for (auto& block : level.blocks) h = residual_block(h, block.stages, mode, update_running);
    skips.push_back(h);  // taken after the level's blocks, before its pool
    h = maxpool2x2(h);
  }
  for (int l = static_cast<int>(m.up.size()) - 1; l >= 0; --l) {
    h = bilinear_upsample_x2(h);
    h = add(h, skips[l]);  // merge by summation
    for (auto& block : m.up[l].blocks) h = residual_block(h, block.stages, mode, update_running);
  }
  return sigmoid(conv3x3(h, m.head_conv, Padding::same_zero));
}

// Per-sample spatial mean of a single-channel mask: [B,1,H,W] -> [B].
template <typename T>
Tensor<T> spatial_mean(const Tensor<T>& mask) {
  detail::require_featuremap(mask, "spatial_mean");
  if (mask.dim(1) != 1) {
    throw std::invalid_argument("spatial_mean: expected a single-channel mask");
  }
  const int B = mask.dim(0);
  const std::size_t plane = static_cast<std::size_t>(mask.dim(2)) * mask.dim(3);
  const T inv = T(1) / static_cast<T>(plane);
  std::vector<T> ov(B);
  for (int b = 0; b < B; ++b) {
    const T* px = mask.values().data() + static_cast<std::size_t>(b) * plane;
    T acc = T(0);
    for (std::size_t i = 0; i < plane; ++i) acc += px[i];
    ov[b] = acc * inv;
  }
  Tensor<T> out = Tensor<T>::from_values({B}, std::move(ov));
  detail::check_finite(out.values(), "spatial_mean");
  auto xn = mask.handle(), on = out.handle();
  detail::record_if_tracked({mask}, out, [xn, on, B, plane, inv]() {
    if (!xn->requires_grad) return;
    for (int b = 0; b < B; ++b) {
      const T g = on->grad[b] * inv;
      T* gx = xn->grad.data() + static_cast<std::size_t>(b) * plane;
      for (std::size_t i = 0; i < plane; ++i) gx[i] += g;
    }
  });
  return out;
}

// --- model file format (.wsm) -----------------------------------------------
//
//   magic "WSMF" | u32 version | u64 total size | u8 kind | u8 scalar size
//   u16 zero | 7 x i32 config | u32 tensor count
//   per tensor: u16 name length, name, u8 rank, rank x i32 dims
//   raw scalar buffers in directory order (little-endian IEEE-754)
//   trailing u64 FNV-1a checksum of all preceding bytes

inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

namespace detail {

constexpr std::uint32_t kModelFormatVersion = 1;

inline void put_bytes(std::string& buf, const void* p, std::size_t n) {
  buf.append(static_cast<const char*>(p), n);
}
template <typename V>
void put_scalar(std::string& buf, V v) {
  put_bytes(buf, &v, sizeof(v));
}

struct Cursor {
  const std::string& buf;
  std::size_t pos = 0;
  void read(void* out, std::size_t n) {
    if (pos + n > buf.size()) throw std::runtime_error("model stream truncated");
    std::memcpy(out, buf.data() + pos, n);
    pos += n;
  }
  template <typename V>
  V scalar() {
    V v;
    read(&v, sizeof(v));
    return v;
  }
};

}  // namespace detail

struct ModelFileInfo {
  std::uint32_t version = 0;
  std::uint64_t total_size = 0;
  ModelKind kind = ModelKind::classifier;
  int scalar_size = 0;  // 4 or 8
  ModelConfig config;
};

namespace detail {
constexpr std::size_t kSizeFieldOffset = 8;                    // after magic + version
constexpr std::size_t kTensorCountOffset = 4 + 4 + 8 + 4 + 28;  // start of tensor count
}  // namespace detail

template <typename T>
std::string serialize_model(Model<T>& m) {
  std::string buf;
  buf.append("WSMF", 4);
  detail::put_scalar<std::uint32_t>(buf, detail::kModelFormatVersion);
  detail::put_scalar<std::uint64_t>(buf, 0);  // total size, patched below
  detail::put_scalar<std::uint8_t>(buf, static_cast<std::uint8_t>(m.kind));
  detail::put_scalar<std::uint8_t>(buf, static_cast<std::uint8_t>(sizeof(T)));
  detail::put_scalar<std::uint16_t>(buf, 0);
  for (int v : {m.config.channels, m.config.levels, m.config.stage_repeats,
                m.config.blocks_per_level, m.config.num_classes, m.config.input_h,
                m.config.input_w}) {
    detail::put_scalar<std::int32_t>(buf, v);
  }
  auto tensors = m.named_tensors();
  detail::put_scalar<std::uint32_t>(buf, static_cast<std::uint32_t>(tensors.size()));
  for (auto& [name, t] : tensors) {
    detail::put_scalar<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
    detail::put_bytes(buf, name.data(), name.size());
    detail::put_scalar<std::uint8_t>(buf, static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape()) detail::put_scalar<std::int32_t>(buf, d);
  }
  for (auto& [name, t] : tensors) {
    detail::put_bytes(buf, t.values().data(), t.values().size() * sizeof(T));
  }
  const std::uint64_t total = buf.size() + 8;
  std::memcpy(buf.data() + detail::kSizeFieldOffset, &total, 8);
  detail::put_scalar<std::uint64_t>(buf, fnv1a64(buf.data(), buf.size()));
  return buf;
}

inline ModelFileInfo parse_model_header(const std::string& buf) {
  detail::Cursor cur{buf};
  char magic[4];
  cur.read(magic, 4);
  if (std::memcmp(magic, "WSMF", 4) != 0) {
    throw std::runtime_error("not a model file (bad magic)");
  }
  ModelFileInfo info;
  info.version = cur.scalar<std::uint32_t>();
  if (info.version != detail::kModelFormatVersion) {
    throw std::runtime_error("unsupported model format version");
  }
  info.total_size = cur.scalar<std::uint64_t>();
  const std::uint8_t kind = cur.scalar<std::uint8_t>();
  if (kind > 1) throw std::runtime_error("model stream has unknown kind");
  info.kind = static_cast<ModelKind>(kind);
  info.scalar_size = cur.scalar<std::uint8_t>();
  if (info.scalar_size != 4 && info.scalar_size != 8) {
    throw std::runtime_error("model stream has unsupported precision");
  }
  cur.scalar<std::uint16_t>();
  info.config.channels = cur.scalar<std::int32_t>();
  info.config.levels = cur.scalar<std::int32_t>();
  info.config.stage_repeats = cur.scalar<std::int32_t>();
  info.config.blocks_per_level = cur.scalar<std::int32_t>();
  info.config.num_classes = cur.scalar<std::int32_t>();
  info.config.input_h = cur.scalar<std::int32_t>();
  info.config.input_w = cur.scalar<std::int32_t>();
  return info;
}

template <typename T>
Model<T> deserialize_model(const std::string& buf) {
  ModelFileInfo info = parse_model_header(buf);  // throws on magic/version/truncation
  if (info.scalar_size != sizeof(T)) {
    throw std::runtime_error("model stream precision does not match requested scalar type");
  }
  if (buf.size() < info.total_size) {
    throw std::runtime_error("model stream truncated");
  }
  std::uint64_t trailer;
  std::memcpy(&trailer, buf.data() + info.total_size - 8, 8);
  if (fnv1a64(buf.data(), info.total_size - 8) != trailer) {
    throw std::runtime_error("model file checksum mismatch");
  }

  detail::Cursor cur{buf};
  cur.pos = detail::kTensorCountOffset;
  const std::uint32_t count = cur.scalar<std::uint32_t>();

  Model<T> m = info.kind == ModelKind::classifier ? build_classifier<T>(info.config, 0)
                                                  : build_segmenter<T>(info.config, 0);
  auto tensors = m.named_tensors();
  if (tensors.size() != count) {
    throw std::runtime_error("model stream directory does not match architecture");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = cur.scalar<std::uint16_t>();
    std::string name(len, '\0');
    cur.read(name.data(), len);
    if (name != tensors[i].first) {
      throw std::runtime_error("model stream directory does not match architecture");
    }
    const std::uint8_t rank = cur.scalar<std::uint8_t>();
    Shape s(rank);
    for (std::uint8_t r = 0; r < rank; ++r) s[r] = cur.scalar<std::int32_t>();
    if (s != tensors[i].second.shape()) {
      throw std::runtime_error("model stream directory does not match architecture");
    }
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor<T>& t = tensors[i].second;
    cur.read(t.values().data(), t.size() * sizeof(T));
  }
  return m;
}

template <typename T>
void save_model(Model<T>& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string buf = serialize_model(m);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("failed writing " + path);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return buf;
}

template <typename T>
Model<T> load_model(const std::string& path) {
  return deserialize_model<T>(read_file_bytes(path));
}

inline ModelFileInfo peek_model_file(const std::string& path) {
  return parse_model_header(read_file_bytes(path));
}

}  // namespace surfseg
