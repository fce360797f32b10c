#include "advit/io.hpp"

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cinttypes>
#include <climits>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "advit/rng.hpp"

namespace advit {

namespace {

// --------------------------- file plumbing --------------------------------

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  std::ostringstream out;
  out << f.rdbuf();
  if (!f.good() && !f.eof()) throw Error("read failed: " + path);
  return out.str();
}

// Writes never leave a partial file behind: the payload goes to a sibling
// temp file that is renamed over the target only after a clean flush.
void write_file_atomic(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open " + tmp + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) throw Error("write failed: " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    std::error_code ignored;
    fs::remove(tmp, ignored);
    throw Error("rename failed for " + path + ": " + ec.message());
  }
}

// --------------------------- byte codec -----------------------------------
// All integers and floats are encoded little-endian regardless of host.

void put_u8(std::string& out, std::uint8_t v) {
  out.push_back(static_cast<char>(v));
}

void put_u16(std::string& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) put_u8(out, (v >> (8 * i)) & 0xFF);
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) put_u8(out, (v >> (8 * i)) & 0xFF);
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) put_u8(out, (v >> (8 * i)) & 0xFF);
}

void put_f32(std::string& out, double v) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

void put_f64(std::string& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

struct Reader {
  const std::string& bytes;
  size_t pos = 0;
  std::string what;  // context for error messages

  void need(size_t n) const {
    if (pos + n > bytes.size()) throw Error(what + ": truncated file");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes[pos++]);
  }
  std::uint16_t u16() {
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= std::uint16_t(u8()) << (8 * i);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(u8()) << (8 * i);
    return v;
  }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(size_t n) {
    need(n);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
  void expect_end() const {
    if (pos != bytes.size()) throw Error(what + ": trailing bytes");
  }
};

// --------------------------- config text ----------------------------------

std::string real_text(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

[[noreturn]] void fail_line(int line, const std::string& msg) {
  throw Error("config line " + std::to_string(line) + ": " + msg);
}

double parse_real(const std::string& v, int line) {
  errno = 0;
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size() || v.empty() || errno == ERANGE)
    fail_line(line, "expected a real number, got '" + v + "'");
  return x;
}

long long parse_ll(const std::string& v, int line) {
  errno = 0;
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (end != v.c_str() + v.size() || v.empty() || errno == ERANGE)
    fail_line(line, "expected an integer, got '" + v + "'");
  return x;
}

int parse_int(const std::string& v, int line) {
  const long long x = parse_ll(v, line);
  if (x < INT_MIN || x > INT_MAX) fail_line(line, "integer out of range");
  return static_cast<int>(x);
}

std::uint64_t parse_u64(const std::string& v, int line) {
  errno = 0;
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (end != v.c_str() + v.size() || v.empty() || errno == ERANGE ||
      v.find('-') != std::string::npos)
    fail_line(line, "expected an unsigned integer, got '" + v + "'");
  return x;
}

bool parse_bool(const std::string& v, int line) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  fail_line(line, "expected a boolean, got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& v, int line) {
  if (v == "none") return {};
  std::vector<int> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ','))
    out.push_back(parse_int(item, line));
  if (out.empty()) fail_line(line, "expected a comma-separated list");
  return out;
}

const char* block_name(BlockKind k) {
  switch (k) {
    case BlockKind::SelfAttention: return "self_attention";
    case BlockKind::ClassAttentionTwoStage: return "class_attention";
    case BlockKind::CrossCovariance: return "cross_covariance";
  }
  throw Error("unknown block kind");
}

BlockKind block_from(const std::string& v, int line) {
  if (v == "self_attention") return BlockKind::SelfAttention;
  if (v == "class_attention") return BlockKind::ClassAttentionTwoStage;
  if (v == "cross_covariance") return BlockKind::CrossCovariance;
  fail_line(line, "unknown block kind '" + v + "'");
}

std::string strides_text(const std::vector<int>& s) {
  if (s.empty()) return "none";
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out;
}

void apply_key(ExperimentConfig& c, const std::string& key,
               const std::string& value, int line) {
  ModelConfig& m = c.model;
  TrainRecipe& r = c.recipe;
  AugPolicy& p = c.recipe.policy;

  auto nonneg_int = [&](const char* what) {
    const int x = parse_int(value, line);
    if (x < 0) fail_line(line, std::string(what) + " must be >= 0");
    return x;
  };
  auto pos_int = [&](const char* what) {
    const int x = parse_int(value, line);
    if (x < 1) fail_line(line, std::string(what) + " must be >= 1");
    return x;
  };
  auto nonneg_real = [&](const char* what) {
    const double x = parse_real(value, line);
    if (x < 0.0) fail_line(line, std::string(what) + " must be >= 0");
    return x;
  };

  if (key == "preset") {
    if (value == "light")
      c = light_preset();
    else if (value == "canonical")
      c = canonical_preset();
    else
      fail_line(line, "unknown preset '" + value + "'");
  } else if (key == "model.block") {
    m.block_kind = block_from(value, line);
  } else if (key == "model.depth") {
    m.depth = pos_int("depth");
  } else if (key == "model.class_attention_depth") {
    m.class_attention_depth = nonneg_int("class_attention_depth");
  } else if (key == "model.d_model") {
    m.d_model = pos_int("d_model");
  } else if (key == "model.heads") {
    m.heads = pos_int("heads");
  } else if (key == "model.num_classes") {
    m.num_classes = pos_int("num_classes");
  } else if (key == "model.image_h") {
    m.image_h = pos_int("image_h");
  } else if (key == "model.image_w") {
    m.image_w = pos_int("image_w");
  } else if (key == "model.image_c") {
    m.image_c = pos_int("image_c");
  } else if (key == "model.patch_embed") {
    if (value == "linear")
      m.patch_embed = PatchEmbedKind::Linear;
    else if (value == "conv_stack")
      m.patch_embed = PatchEmbedKind::ConvStack;
    else
      fail_line(line, "unknown patch embedding '" + value + "'");
  } else if (key == "model.patch_size") {
    m.patch_size = pos_int("patch_size");
  } else if (key == "model.conv_strides") {
    m.conv_strides = parse_int_list(value, line);
  } else if (key == "model.pos_encoding") {
    if (value == "learned")
      m.pos_encoding = PosEncodingKind::Learned;
    else if (value == "sinusoidal")
      m.pos_encoding = PosEncodingKind::Sinusoidal;
    else
      fail_line(line, "unknown positional encoding '" + value + "'");
  } else if (key == "model.layerscale_init") {
    if (value == "none")
      m.layerscale_init.reset();
    else if (value == "auto")
      m.layerscale_init = default_layerscale_init(m.block_kind, m.depth);
    else
      m.layerscale_init = parse_real(value, line);
  } else if (key == "model.mlp_ratio") {
    m.mlp_ratio = parse_real(value, line);
    if (m.mlp_ratio <= 0.0) fail_line(line, "mlp_ratio must be positive");
  } else if (key == "train.epochs") {
    r.epochs = pos_int("epochs");
  } else if (key == "train.eps_max") {
    r.eps_max = nonneg_real("eps_max");
  } else if (key == "train.eps_warmup_epochs") {
    r.eps_warmup_epochs = nonneg_int("eps_warmup_epochs");
  } else if (key == "train.attack_steps") {
    r.attack.steps = pos_int("attack_steps");
  } else if (key == "train.weight_decay") {
    r.weight_decay = nonneg_real("weight_decay");
  } else if (key == "train.base_lr") {
    r.base_lr = nonneg_real("base_lr");
  } else if (key == "train.batch_size") {
    r.batch_size = pos_int("batch_size");
  } else if (key == "train.lr_warmup_epochs") {
    r.lr_warmup_epochs = nonneg_int("lr_warmup_epochs");
  } else if (key == "train.lr_cooldown_epochs") {
    r.lr_cooldown_epochs = nonneg_int("lr_cooldown_epochs");
  } else if (key == "train.lr_warmup_start") {
    r.lr_warmup_start = parse_real(value, line);
  } else if (key == "train.lr_final") {
    r.lr_final = parse_real(value, line);
  } else if (key == "train.loss") {
    if (value == "plain")
      r.loss_mode = LossMode::PlainAdversarial;
    else if (value == "trades")
      r.loss_mode = LossMode::Trades;
    else
      fail_line(line, "unknown loss mode '" + value + "'");
  } else if (key == "train.trades_beta") {
    r.trades_beta = nonneg_real("trades_beta");
  } else if (key == "train.trades_steps") {
    r.trades_steps = pos_int("trades_steps");
  } else if (key == "train.grad_clip") {
    r.grad_clip = nonneg_real("grad_clip");
  } else if (key == "train.auto_two_step_fgsm") {
    r.auto_two_step_fgsm = parse_bool(value, line);
  } else if (key == "train.seed") {
    r.seed = parse_u64(value, line);
  } else if (key == "augment.mixup") {
    p.mixup = parse_bool(value, line);
  } else if (key == "augment.mixup_alpha") {
    p.mixup_alpha = nonneg_real("mixup_alpha");
  } else if (key == "augment.cutmix") {
    p.cutmix = parse_bool(value, line);
  } else if (key == "augment.cutmix_alpha") {
    p.cutmix_alpha = nonneg_real("cutmix_alpha");
  } else if (key == "augment.randaugment") {
    p.randaugment = parse_bool(value, line);
  } else if (key == "augment.ra_ops") {
    p.ra_ops = pos_int("ra_ops");
  } else if (key == "augment.ra_magnitude") {
    p.ra_magnitude = nonneg_real("ra_magnitude");
  } else if (key == "augment.random_erasing") {
    p.random_erasing = parse_bool(value, line);
  } else if (key == "augment.erase_prob") {
    p.erase_prob = nonneg_real("erase_prob");
  } else if (key == "augment.erase_area_lo") {
    p.erase_area_lo = nonneg_real("erase_area_lo");
  } else if (key == "augment.erase_area_hi") {
    p.erase_area_hi = nonneg_real("erase_area_hi");
  } else if (key == "augment.erase_aspect_lo") {
    p.erase_aspect_lo = nonneg_real("erase_aspect_lo");
  } else if (key == "augment.erase_aspect_hi") {
    p.erase_aspect_hi = nonneg_real("erase_aspect_hi");
  } else if (key == "augment.erase_fill") {
    if (value == "zeros")
      p.erase_fill = EraseFill::Zeros;
    else if (value == "normal")
      p.erase_fill = EraseFill::Normal;
    else
      fail_line(line, "unknown erase fill '" + value + "'");
  } else if (key == "augment.erase_mean") {
    p.erase_mean = parse_real(value, line);
  } else if (key == "augment.erase_std") {
    p.erase_std = nonneg_real("erase_std");
  } else if (key == "augment.flip_prob") {
    p.flip_prob = nonneg_real("flip_prob");
  } else if (key == "augment.crop_scale_lo") {
    p.crop_scale_lo = nonneg_real("crop_scale_lo");
  } else if (key == "augment.crop_scale_hi") {
    p.crop_scale_hi = nonneg_real("crop_scale_hi");
  } else if (key == "augment.crop_ratio_lo") {
    p.crop_ratio_lo = nonneg_real("crop_ratio_lo");
  } else if (key == "augment.crop_ratio_hi") {
    p.crop_ratio_hi = nonneg_real("crop_ratio_hi");
  } else if (key == "augment.jitter") {
    p.jitter = nonneg_real("jitter");
  } else {
    fail_line(line, "unknown key '" + key + "'");
  }
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// --------------------------- tensor directory -----------------------------

using NamedTensors = std::map<std::string, Tensor>;

void put_tensor_block(std::string& out, const NamedTensors& tensors,
                      const std::string& what) {
  if (tensors.size() > 0xFFFFFFFFull) throw Error(what + ": too many tensors");
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    if (name.empty() || name.size() > 0xFFFF)
      throw Error(what + ": bad tensor name '" + name + "'");
    if (tensor.rank() > 0xFF) throw Error(what + ": rank too large");
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put_u8(out, 0);  // dtype tag: 32-bit float
    put_u8(out, static_cast<std::uint8_t>(tensor.rank()));
    for (int extent : tensor.shape) {
      if (extent < 0) throw Error(what + ": negative extent");
      put_u32(out, static_cast<std::uint32_t>(extent));
    }
  }
  for (const auto& [name, tensor] : tensors)
    for (double v : tensor.data) put_f32(out, v);
}

NamedTensors read_tensor_block(Reader& in) {
  const std::uint32_t count = in.u32();
  std::vector<std::pair<std::string, Shape>> directory;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = in.u16();
    std::string name = in.str(name_len);
    if (name.empty()) throw Error(in.what + ": empty tensor name");
    const std::uint8_t dtype = in.u8();
    if (dtype != 0)
      throw Error(in.what + ": unknown dtype tag " + std::to_string(dtype));
    const std::uint8_t rank = in.u8();
    Shape shape(rank);
    for (int d = 0; d < rank; ++d) {
      const std::uint32_t extent = in.u32();
      if (extent > (1u << 28)) throw Error(in.what + ": extent too large");
      shape[d] = static_cast<int>(extent);
    }
    directory.emplace_back(std::move(name), std::move(shape));
  }
  NamedTensors out;
  for (auto& [name, shape] : directory) {
    Tensor t{Shape(shape)};
    std::uint64_t numel = 1;
    for (int e : shape) numel *= static_cast<std::uint64_t>(e);
    if (numel > (1ull << 30)) throw Error(in.what + ": tensor too large");
    for (std::uint64_t i = 0; i < numel; ++i) t.data[i] = in.f32();
    if (!out.emplace(name, std::move(t)).second)
      throw Error(in.what + ": duplicate tensor '" + name + "'");
  }
  return out;
}

constexpr char kDatasetMagic[] = "ADVDSET1";
constexpr char kCheckpointMagic[] = "ADVTCKPT";
constexpr std::uint32_t kFormatVersion = 1;

}  // namespace

// --------------------------- presets ---------------------------------------

ExperimentConfig light_preset() {
  ExperimentConfig c;
  c.recipe.policy = light_policy();
  return c;  // recipe defaults are the light recipe
}

ExperimentConfig canonical_preset() {
  ExperimentConfig c = light_preset();
  c.recipe.weight_decay = 0.05;
  c.recipe.policy = canonical_policy();
  return c;
}

// --------------------------- config text -----------------------------------

std::string render_config(const ExperimentConfig& c) {
  const ModelConfig& m = c.model;
  const TrainRecipe& r = c.recipe;
  const AugPolicy& p = c.recipe.policy;
  std::ostringstream out;
  auto kv = [&](const char* key, const std::string& value) {
    out << key << " = " << value << "\n";
  };
  auto kb = [&](const char* key, bool value) {
    kv(key, value ? "true" : "false");
  };

  kv("model.block", block_name(m.block_kind));
  kv("model.depth", std::to_string(m.depth));
  kv("model.class_attention_depth", std::to_string(m.class_attention_depth));
  kv("model.d_model", std::to_string(m.d_model));
  kv("model.heads", std::to_string(m.heads));
  kv("model.num_classes", std::to_string(m.num_classes));
  kv("model.image_h", std::to_string(m.image_h));
  kv("model.image_w", std::to_string(m.image_w));
  kv("model.image_c", std::to_string(m.image_c));
  kv("model.patch_embed",
     m.patch_embed == PatchEmbedKind::Linear ? "linear" : "conv_stack");
  kv("model.patch_size", std::to_string(m.patch_size));
  kv("model.conv_strides", strides_text(m.conv_strides));
  kv("model.pos_encoding",
     m.pos_encoding == PosEncodingKind::Learned ? "learned" : "sinusoidal");
  kv("model.layerscale_init",
     m.layerscale_init ? real_text(*m.layerscale_init) : "none");
  kv("model.mlp_ratio", real_text(m.mlp_ratio));

  kv("train.epochs", std::to_string(r.epochs));
  kv("train.eps_max", real_text(r.eps_max));
  kv("train.eps_warmup_epochs", std::to_string(r.eps_warmup_epochs));
  kv("train.attack_steps", std::to_string(r.attack.steps));
  kv("train.weight_decay", real_text(r.weight_decay));
  kv("train.base_lr", real_text(r.base_lr));
  kv("train.batch_size", std::to_string(r.batch_size));
  kv("train.lr_warmup_epochs", std::to_string(r.lr_warmup_epochs));
  kv("train.lr_cooldown_epochs", std::to_string(r.lr_cooldown_epochs));
  kv("train.lr_warmup_start", real_text(r.lr_warmup_start));
  kv("train.lr_final", real_text(r.lr_final));
  kv("train.loss", r.loss_mode == LossMode::Trades ? "trades" : "plain");
  kv("train.trades_beta", real_text(r.trades_beta));
  kv("train.trades_steps", std::to_string(r.trades_steps));
  kv("train.grad_clip", real_text(r.grad_clip));
  kb("train.auto_two_step_fgsm", r.auto_two_step_fgsm);
  kv("train.seed", std::to_string(r.seed));

  kb("augment.mixup", p.mixup);
  kv("augment.mixup_alpha", real_text(p.mixup_alpha));
  kb("augment.cutmix", p.cutmix);
  kv("augment.cutmix_alpha", real_text(p.cutmix_alpha));
  kb("augment.randaugment", p.randaugment);
  kv("augment.ra_ops", std::to_string(p.ra_ops));
  kv("augment.ra_magnitude", real_text(p.ra_magnitude));
  kb("augment.random_erasing", p.random_erasing);
  kv("augment.erase_prob", real_text(p.erase_prob));
  kv("augment.erase_area_lo", real_text(p.erase_area_lo));
  kv("augment.erase_area_hi", real_text(p.erase_area_hi));
  kv("augment.erase_aspect_lo", real_text(p.erase_aspect_lo));
  kv("augment.erase_aspect_hi", real_text(p.erase_aspect_hi));
  kv("augment.erase_fill",
     p.erase_fill == EraseFill::Zeros ? "zeros" : "normal");
  kv("augment.erase_mean", real_text(p.erase_mean));
  kv("augment.erase_std", real_text(p.erase_std));
  kv("augment.flip_prob", real_text(p.flip_prob));
  kv("augment.crop_scale_lo", real_text(p.crop_scale_lo));
  kv("augment.crop_scale_hi", real_text(p.crop_scale_hi));
  kv("augment.crop_ratio_lo", real_text(p.crop_ratio_lo));
  kv("augment.crop_ratio_hi", real_text(p.crop_ratio_hi));
  kv("augment.jitter", real_text(p.jitter));
  return out.str();
}

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig config = light_preset();
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string stripped = trim(raw);
    if (stripped.empty()) continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      fail_line(line, "expected 'key = value'");
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) fail_line(line, "empty key");
    if (value.empty()) fail_line(line, "empty value for '" + key + "'");
    apply_key(config, key, value, line);
  }
  try {
    config.model.validate();
    config.recipe.validate();
  } catch (const Error& e) {
    throw Error(std::string("config: ") + e.what());
  }
  return config;
}

ExperimentConfig parse_config_file(const std::string& path) {
  return parse_config_text(read_file(path));
}

// --------------------------- dataset files ---------------------------------

void save_dataset(const std::string& path, const Dataset& data) {
  data.validate();
  if (data.num_classes > 255)
    throw Error("save_dataset: at most 255 classes fit the label byte");
  std::string out;
  out += kDatasetMagic;
  put_u32(out, kFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  put_u32(out, static_cast<std::uint32_t>(data.height()));
  put_u32(out, static_cast<std::uint32_t>(data.width()));
  put_u32(out, static_cast<std::uint32_t>(data.channels()));
  put_u32(out, static_cast<std::uint32_t>(data.num_classes));
  for (double v : data.images.data)
    put_u8(out, static_cast<std::uint8_t>(std::lround(v * 255.0)));
  for (int label : data.labels)
    put_u8(out, static_cast<std::uint8_t>(label));
  write_file_atomic(path, out);
}

Dataset load_dataset(const std::string& path) {
  const std::string bytes = read_file(path);
  Reader in{bytes, 0, "dataset file " + path};
  if (in.str(8) != kDatasetMagic) throw Error(in.what + ": bad magic");
  const std::uint32_t version = in.u32();
  if (version != kFormatVersion)
    throw Error(in.what + ": unsupported version " + std::to_string(version));
  const std::uint32_t count = in.u32();
  const std::uint32_t h = in.u32(), w = in.u32(), c = in.u32();
  const std::uint32_t classes = in.u32();
  if (h == 0 || w == 0 || c == 0 || classes < 2)
    throw Error(in.what + ": bad geometry header");
  const std::uint64_t pixels =
      std::uint64_t(count) * h * w * c;
  if (pixels > (1ull << 32)) throw Error(in.what + ": implausible size");

  Dataset data;
  data.num_classes = static_cast<int>(classes);
  data.images = Tensor(Shape{static_cast<int>(count), static_cast<int>(h),
                             static_cast<int>(w), static_cast<int>(c)});
  for (std::uint64_t i = 0; i < pixels; ++i)
    data.images.data[i] = in.u8() / 255.0;
  data.labels.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    data.labels[i] = in.u8();
    if (data.labels[i] >= data.num_classes)
      throw Error(in.what + ": label out of range at index " +
                  std::to_string(i));
  }
  in.expect_end();
  data.validate();
  return data;
}

Dataset generate_blobs(const BlobSpec& spec) {
  if (spec.count < 0) throw Error("generate_blobs: negative count");
  if (spec.height < 1 || spec.width < 1 || spec.channels < 1)
    throw Error("generate_blobs: bad image geometry");
  if (spec.margin < 0.0 || spec.margin >= 1.0)
    throw Error("generate_blobs: margin must be in [0, 1)");

  // Class slabs [0, (1-m)/2] and [(1+m)/2, 1], snapped inward to the 8-bit
  // grid so the separation survives file quantization.
  const int hi0 = static_cast<int>(std::floor((1.0 - spec.margin) / 2.0 * 255.0));
  const int lo1 = static_cast<int>(std::ceil((1.0 + spec.margin) / 2.0 * 255.0));
  const double width0 = hi0 / 255.0;

  Dataset data;
  data.num_classes = 2;
  data.images = Tensor(
      Shape{spec.count, spec.height, spec.width, spec.channels});
  data.labels.resize(spec.count);
  auto rng = make_rng(derive_seed(spec.seed, 0xB10B));
  std::normal_distribution<double> noise(0.0, width0 / 4.0);
  const size_t stride =
      static_cast<size_t>(spec.height) * spec.width * spec.channels;
  for (int i = 0; i < spec.count; ++i) {
    const int label = i % 2;
    data.labels[i] = label;
    const double center = label ? (lo1 + 255) / 2.0 : hi0 / 2.0;
    const int lo = label ? lo1 : 0;
    const int hi = label ? 255 : hi0;
    for (size_t p = 0; p < stride; ++p) {
      const double raw = center + noise(rng) * 255.0;
      const int q = std::clamp(static_cast<int>(std::lround(raw)), lo, hi);
      data.images.data[i * stride + p] = q / 255.0;
    }
  }
  return data;
}

// --------------------------- checkpoints ------------------------------------

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  std::string out;
  out += kCheckpointMagic;
  put_u32(out, kFormatVersion);
  const std::string config_text = render_config(checkpoint.config);
  put_u64(out, config_text.size());
  out += config_text;

  put_tensor_block(out, checkpoint.params, "checkpoint parameters");

  put_u32(out, static_cast<std::uint32_t>(checkpoint.history.size()));
  for (const EpochRecord& rec : checkpoint.history) {
    if (rec.epoch < 0) throw Error("save_checkpoint: negative epoch");
    put_u32(out, static_cast<std::uint32_t>(rec.epoch));
    put_f64(out, rec.clean_val_acc);
    put_f64(out, rec.fgsm_val_acc);
    put_f64(out, rec.train_loss);
    put_f64(out, rec.eps);
    put_f64(out, rec.lr);
  }

  put_u8(out, checkpoint.optimizer ? 1 : 0);
  if (checkpoint.optimizer) {
    const OptimizerState& opt = *checkpoint.optimizer;
    if (opt.step < 0) throw Error("save_checkpoint: negative optimizer step");
    put_u64(out, static_cast<std::uint64_t>(opt.step));
    put_f64(out, opt.beta1);
    put_f64(out, opt.beta2);
    put_f64(out, opt.eps);
    put_tensor_block(out, opt.m, "optimizer first moments");
    put_tensor_block(out, opt.v, "optimizer second moments");
  }
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  Reader in{bytes, 0, "checkpoint file " + path};
  if (in.str(8) != kCheckpointMagic) throw Error(in.what + ": bad magic");
  const std::uint32_t version = in.u32();
  if (version != kFormatVersion)
    throw Error(in.what + ": unsupported version " + std::to_string(version));

  Checkpoint ckpt;
  const std::uint64_t config_len = in.u64();
  if (config_len > (1ull << 24)) throw Error(in.what + ": config too large");
  ckpt.config = parse_config_text(in.str(config_len));

  ckpt.params = read_tensor_block(in);

  const std::uint32_t records = in.u32();
  for (std::uint32_t i = 0; i < records; ++i) {
    EpochRecord rec;
    rec.epoch = static_cast<int>(in.u32());
    rec.clean_val_acc = in.f64();
    rec.fgsm_val_acc = in.f64();
    rec.train_loss = in.f64();
    rec.eps = in.f64();
    rec.lr = in.f64();
    ckpt.history.push_back(rec);
  }

  if (in.u8() != 0) {
    OptimizerState opt;
    opt.step = static_cast<long>(in.u64());
    opt.beta1 = in.f64();
    opt.beta2 = in.f64();
    opt.eps = in.f64();
    opt.m = read_tensor_block(in);
    opt.v = read_tensor_block(in);
    ckpt.optimizer = std::move(opt);
  }
  in.expect_end();
  return ckpt;
}

// --------------------------- metrics ----------------------------------------

void write_metrics(const std::string& path, const MetricsTable& table) {
  if (table.columns.empty()) throw Error("write_metrics: no columns");
  std::string out;
  for (size_t i = 0; i < table.columns.size(); ++i) {
    const std::string& name = table.columns[i];
    if (name.empty() || name.find_first_of(",\n\r") != std::string::npos)
      throw Error("write_metrics: bad column name '" + name + "'");
    if (i) out += ",";
    out += name;
  }
  out += "\n";
  for (const std::vector<double>& row : table.rows) {
    if (row.size() != table.columns.size())
      throw Error("write_metrics: row width does not match the header");
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) out += ",";
      out += real_text(row[i]);
    }
    out += "\n";
  }
  write_file_atomic(path, out);
}

MetricsTable history_table(const TrainHistory& history) {
  MetricsTable t;
  t.columns = {"epoch", "clean_val_acc", "fgsm_val_acc",
               "train_loss", "eps", "lr"};
  for (const EpochRecord& r : history)
    t.rows.push_back({static_cast<double>(r.epoch), r.clean_val_acc,
                      r.fgsm_val_acc, r.train_loss, r.eps, r.lr});
  return t;
}

// --------------------------- image dumps ------------------------------------

void write_image(const std::string& path, const Tensor& image) {
  if (image.rank() != 3)
    throw Error("write_image: expected an (H, W, C) tensor");
  const int h = image.extent(0), w = image.extent(1), c = image.extent(2);
  if (c != 1 && c != 3)
    throw Error("write_image: only 1- or 3-channel images are supported");
  for (double v : image.data)
    if (!(v >= -1e-9 && v <= 1.0 + 1e-9))
      throw Error("write_image: pixels must lie in [0, 1]");

  std::string out;
  out += (c == 1) ? "P5" : "P6";
  out += "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (double v : image.data) {
    const double clamped = std::min(1.0, std::max(0.0, v));
    put_u8(out, static_cast<std::uint8_t>(std::lround(clamped * 255.0)));
  }
  write_file_atomic(path, out);
}

}  // namespace advit
