#include "stgaze/runconfig.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>
#include <sstream>

#include "stgaze/errors.hpp"

namespace stgaze {
namespace {

enum class Kind { kBool, kInt, kDouble, kIntList, kDoubleList, kString };

struct KeySpec {
  const char* name;
  Kind kind;
  const char* def;
  const char* help;
};

// The single source of truth for configuration keys; every key carries its
// default and a one-line description for --help.
struct KeyTable {
  std::vector<KeySpec> keys;
  KeyTable() {
    keys = {
        {"model.input_size", Kind::kInt, "128", "eye/face patch edge length in pixels"},
        {"model.eye_widths", Kind::kIntList, "16,32,64,128",
         "eye encoder stage widths; each stride-2 stage halves the grid, last width is the "
         "output channel count"},
        {"model.face_widths", Kind::kIntList, "8,16,24,32",
         "face encoder stage widths; same convention as model.eye_widths"},
        {"model.eca_kernel", Kind::kInt, "0",
         "ECA 1-D kernel size; 0 derives the odd size from the fused channel count"},
        {"model.sam_blocks", Kind::kInt, "3", "number of transformer encoder blocks"},
        {"model.sam_heads", Kind::kInt, "8", "attention heads per block"},
        {"model.ffn_hidden", Kind::kInt, "0", "transformer FFN width; 0 = 4x the fused channels"},
        {"model.gru_layers", Kind::kInt, "2", "stacked GRU layers in the recurrence"},
        {"model.gru_hidden", Kind::kInt, "0", "GRU hidden width; 0 = fused channel count"},
        {"model.head_hidden", Kind::kInt, "64", "regression head hidden width"},
        {"model.input_center", Kind::kDouble, "0.5",
         "value subtracted from input pixels before the first conv; 0 disables"},
        {"model.use_eca", Kind::kBool, "true", "enable the channel-attention gate"},
        {"model.use_sam", Kind::kBool, "true", "enable the self-attention module"},
        {"model.use_gru", Kind::kBool, "true", "enable the spatio-temporal recurrence"},
        {"model.pool_before_gru", Kind::kBool, "false",
         "spatially pool features before the recurrence (the conventional prior design)"},
        {"model.share_stream_params", Kind::kBool, "true",
         "left and right eye streams share one parameter set"},
        {"model.init_seed", Kind::kInt, "42", "weight initialization seed"},
        {"loss.lambda_ang", Kind::kDouble, "1.0", "weight of the angular error term (degrees)"},
        {"loss.lambda_cm", Kind::kDouble, "0.01", "weight of the PoG error term in cm"},
        {"loss.lambda_px", Kind::kDouble, "0.0", "weight of the PoG error term in pixels"},
        {"loss.per_stream", Kind::kBool, "false",
         "additionally supervise the two per-stream predictions"},
        {"train.epochs", Kind::kInt, "4", "training epochs"},
        {"train.batch_size", Kind::kInt, "6", "sequences per optimizer step"},
        {"train.base_lr", Kind::kDouble, "1e-4", "base learning rate at batch size 6"},
        {"train.scale_lr_with_batch", Kind::kBool, "true",
         "scale the base learning rate linearly with batch_size/6"},
        {"train.grad_clip", Kind::kDouble, "10.0", "global gradient-norm clip; 0 disables"},
        {"train.offset_std_deg", Kind::kDouble, "3.0",
         "std of the per-sequence constant label offset applied during training"},
        {"train.seed", Kind::kInt, "7", "shuffling/augmentation seed"},
        {"train.threads", Kind::kInt, "1",
         "worker threads per batch; gradients always reduce in item order"},
        {"scene.seed", Kind::kInt, "1234", "global dataset seed"},
        {"scene.sequence_length", Kind::kInt, "8", "frames per generated sequence"},
        {"scene.gaze_range_deg", Kind::kDouble, "25.0", "max |pitch| and |yaw| of labels"},
        {"scene.gain_px", Kind::kDouble, "40.0", "iris travel in px per unit sin(angle)"},
        {"scene.iris_radius_px", Kind::kDouble, "14.0", "iris disc radius"},
        {"scene.pupil_radius_px", Kind::kDouble, "6.0", "pupil disc radius"},
        {"scene.bg_level", Kind::kDouble, "0.5", "background gray level"},
        {"scene.sclera_level", Kind::kDouble, "0.9", "sclera gray level"},
        {"scene.iris_level", Kind::kDouble, "0.35", "iris gray level"},
        {"scene.pupil_level", Kind::kDouble, "0.05", "pupil gray level"},
        {"scene.noise_std", Kind::kDouble, "0.01", "additive Gaussian pixel noise std"},
        {"scene.step_std_deg", Kind::kDouble, "2.0", "gaze random-walk innovation std per frame"},
        {"scene.mean_revert", Kind::kDouble, "0.9", "gaze random-walk mean reversion factor"},
        {"scene.origin_cm", Kind::kDoubleList, "0,10,55", "gaze origin in camera coordinates"},
        {"scene.face_scale", Kind::kDouble, "0.5", "eye rendering scale inside the face patch"},
        {"screen.width_cm", Kind::kDouble, "60.0", "screen width"},
        {"screen.height_cm", Kind::kDouble, "33.75", "screen height"},
        {"screen.width_px", Kind::kInt, "1920", "horizontal resolution"},
        {"screen.height_px", Kind::kInt, "1080", "vertical resolution"},
        {"paths.data", Kind::kString, "", "default dataset directory (CLI --data overrides)"},
        {"paths.out", Kind::kString, "", "default output directory (CLI --out overrides)"},
    };
  }

  const KeySpec* find(const std::string& name) const {
    for (const auto& k : keys) {
      if (name == k.name) return &k;
    }
    return nullptr;
  }
};

const KeyTable& key_table() {
  static const KeyTable table;
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v, bool* out) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") {
    *out = true;
    return true;
  }
  if (v == "false" || v == "0" || v == "no" || v == "off") {
    *out = false;
    return true;
  }
  return false;
}

bool parse_int(const std::string& v, std::int64_t* out) {
  try {
    std::size_t pos = 0;
    *out = std::stoll(v, &pos);
    return pos == v.size();
  } catch (...) {
    return false;
  }
}

bool parse_double(const std::string& v, double* out) {
  try {
    std::size_t pos = 0;
    *out = std::stod(v, &pos);
    return pos == v.size();
  } catch (...) {
    return false;
  }
}

template <typename T, typename ParseFn>
bool parse_list(const std::string& v, ParseFn parse, std::vector<T>* out) {
  out->clear();
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    T value;
    if (!parse(trim(item), &value)) return false;
    out->push_back(value);
  }
  return !out->empty();
}

void check_value(const KeySpec& spec, const std::string& value, int line) {
  bool ok = true;
  switch (spec.kind) {
    case Kind::kBool: {
      bool b;
      ok = parse_bool(value, &b);
      break;
    }
    case Kind::kInt: {
      std::int64_t i;
      ok = parse_int(value, &i);
      break;
    }
    case Kind::kDouble: {
      double d;
      ok = parse_double(value, &d);
      break;
    }
    case Kind::kIntList: {
      std::vector<std::int64_t> v;
      ok = parse_list<std::int64_t>(value, parse_int, &v);
      break;
    }
    case Kind::kDoubleList: {
      std::vector<double> v;
      ok = parse_list<double>(value, parse_double, &v);
      break;
    }
    case Kind::kString:
      break;
  }
  if (!ok) {
    throw ConfigError("config: invalid value '" + value + "' for key '" + spec.name + "'", line);
  }
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& k : key_table().keys) values_[k.name] = k.def;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open '" + path + "'");
  RunConfig cfg;
  std::string raw;
  int line = 0;
  while (std::getline(is, raw)) {
    ++line;
    std::string s = raw;
    const auto hash = s.find('#');
    if (hash != std::string::npos) s = s.substr(0, hash);
    s = trim(s);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: expected 'key = value', got '" + trim(raw) + "'", line);
    }
    cfg.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)), line);
  }
  return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value, int line) {
  const KeySpec* spec = key_table().find(key);
  if (spec == nullptr) throw ConfigError("config: unknown key '" + key + "'", line);
  check_value(*spec, value, line);
  values_[key] = value;
}

std::string RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
  return it->second;
}

bool RunConfig::get_bool(const std::string& key) const {
  bool b = false;
  if (!parse_bool(get(key), &b)) throw ConfigError("config: key '" + key + "' is not a bool");
  return b;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
  std::int64_t v = 0;
  if (!parse_int(get(key), &v)) throw ConfigError("config: key '" + key + "' is not an integer");
  return v;
}

double RunConfig::get_double(const std::string& key) const {
  double v = 0.0;
  if (!parse_double(get(key), &v)) throw ConfigError("config: key '" + key + "' is not a number");
  return v;
}

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
  std::vector<std::int64_t> raw;
  if (!parse_list<std::int64_t>(get(key), parse_int, &raw)) {
    throw ConfigError("config: key '" + key + "' is not an integer list");
  }
  std::vector<int> out(raw.size());
  std::transform(raw.begin(), raw.end(), out.begin(),
                 [](std::int64_t v) { return static_cast<int>(v); });
  return out;
}

std::vector<double> RunConfig::get_double_list(const std::string& key) const {
  std::vector<double> out;
  if (!parse_list<double>(get(key), parse_double, &out)) {
    throw ConfigError("config: key '" + key + "' is not a number list");
  }
  return out;
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  m.eye.input_size = static_cast<int>(get_int("model.input_size"));
  m.eye.widths = get_int_list("model.eye_widths");
  m.face.input_size = m.eye.input_size;
  m.face.widths = get_int_list("model.face_widths");
  m.eca.kernel_size = static_cast<int>(get_int("model.eca_kernel"));
  m.sam.num_blocks = static_cast<int>(get_int("model.sam_blocks"));
  m.sam.num_heads = static_cast<int>(get_int("model.sam_heads"));
  m.sam.ffn_hidden = static_cast<int>(get_int("model.ffn_hidden"));
  m.gru.num_layers = static_cast<int>(get_int("model.gru_layers"));
  m.gru.hidden_dim = static_cast<int>(get_int("model.gru_hidden"));
  m.head_hidden = static_cast<int>(get_int("model.head_hidden"));
  m.input_center = get_double("model.input_center");
  m.use_eca = get_bool("model.use_eca");
  m.use_sam = get_bool("model.use_sam");
  m.use_gru = get_bool("model.use_gru");
  m.pool_before_gru = get_bool("model.pool_before_gru");
  m.share_stream_params = get_bool("model.share_stream_params");
  m.init_seed = static_cast<std::uint64_t>(get_int("model.init_seed"));
  m.finalize();
  return m;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  t.epochs = static_cast<int>(get_int("train.epochs"));
  t.batch_size = static_cast<int>(get_int("train.batch_size"));
  t.base_lr = get_double("train.base_lr");
  t.scale_lr_with_batch = get_bool("train.scale_lr_with_batch");
  t.grad_clip = get_double("train.grad_clip");
  t.offset_std_deg = get_double("train.offset_std_deg");
  t.per_stream_loss = get_bool("loss.per_stream");
  t.weights = loss_weights();
  t.seed = static_cast<std::uint64_t>(get_int("train.seed"));
  t.threads = static_cast<int>(get_int("train.threads"));
  return t;
}

SceneParams RunConfig::scene() const {
  SceneParams p;
  p.seed = static_cast<std::uint64_t>(get_int("scene.seed"));
  p.sequence_length = static_cast<int>(get_int("scene.sequence_length"));
  p.gaze_range_deg = get_double("scene.gaze_range_deg");
  p.gain_px = get_double("scene.gain_px");
  p.iris_radius_px = get_double("scene.iris_radius_px");
  p.pupil_radius_px = get_double("scene.pupil_radius_px");
  p.bg_level = get_double("scene.bg_level");
  p.sclera_level = get_double("scene.sclera_level");
  p.iris_level = get_double("scene.iris_level");
  p.pupil_level = get_double("scene.pupil_level");
  p.noise_std = get_double("scene.noise_std");
  p.step_std_deg = get_double("scene.step_std_deg");
  p.mean_revert = get_double("scene.mean_revert");
  const auto origin = get_double_list("scene.origin_cm");
  if (origin.size() != 3) throw ConfigError("config: scene.origin_cm needs three values");
  p.origin_cm = Vec3Cm{origin[0], origin[1], origin[2]};
  p.face_scale = get_double("scene.face_scale");
  p.validate();
  return p;
}

ScreenGeometry RunConfig::screen() const {
  ScreenGeometry g;
  g.width_cm = get_double("screen.width_cm");
  g.height_cm = get_double("screen.height_cm");
  g.width_px = static_cast<int>(get_int("screen.width_px"));
  g.height_px = static_cast<int>(get_int("screen.height_px"));
  if (g.width_cm <= 0 || g.height_cm <= 0 || g.width_px <= 0 || g.height_px <= 0) {
    throw ConfigError("config: screen dimensions must be positive");
  }
  return g;
}

LossWeights RunConfig::loss_weights() const {
  LossWeights w;
  w.lambda_ang = get_double("loss.lambda_ang");
  w.lambda_cm = get_double("loss.lambda_cm");
  w.lambda_px = get_double("loss.lambda_px");
  w.validate();
  return w;
}

std::uint64_t RunConfig::data_seed() const {
  return static_cast<std::uint64_t>(get_int("scene.seed"));
}

int RunConfig::sequence_length() const {
  return static_cast<int>(get_int("scene.sequence_length"));
}

void RunConfig::print_key_help(std::ostream& os) {
  os << "Configuration keys (key = value, '#' comments):\n";
  for (const auto& k : key_table().keys) {
    os << "  " << k.name;
    for (std::size_t i = std::string(k.name).size(); i < 28; ++i) os << ' ';
    os << "default: " << (std::string(k.def).empty() ? "(empty)" : k.def) << "\n      " << k.help
       << "\n";
  }
}

}  // namespace stgaze
