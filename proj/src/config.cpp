#include "vaedg/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "vaedg/errors.hpp"

namespace vaedg {

const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::vae_dg: return "vae_dg";
    case Algorithm::erm: return "erm";
    case Algorithm::fishr: return "fishr";
    case Algorithm::swad: return "swad";
    case Algorithm::drgen: return "drgen";
    case Algorithm::vae_dg_swad: return "vae_dg_swad";
  }
  return "unknown";
}

const char* to_string(OptimizerKind o) { return o == OptimizerKind::adam ? "adam" : "sgd"; }
const char* to_string(Scale s) { return s == Scale::desk ? "desk" : "full"; }

const char* to_string(KlReduction k) { return k == KlReduction::sum ? "sum" : "mean"; }

KlReduction parse_kl_reduction(const std::string& s) {
  if (s == "sum") return KlReduction::sum;
  if (s == "mean") return KlReduction::mean;
  throw InvalidInput("unknown kl_reduction: " + s);
}

Algorithm parse_algorithm(const std::string& s) {
  for (auto a : {Algorithm::vae_dg, Algorithm::erm, Algorithm::fishr, Algorithm::swad, Algorithm::drgen,
                 Algorithm::vae_dg_swad})
    if (s == to_string(a)) return a;
  throw InvalidInput("unknown algorithm: " + s);
}

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw InvalidInput("unknown optimizer: " + s);
}

Scale parse_scale(const std::string& s) {
  if (s == "desk") return Scale::desk;
  if (s == "full") return Scale::full;
  throw InvalidInput("unknown scale: " + s);
}

bool uses_vae_objective(Algorithm a) { return a == Algorithm::vae_dg || a == Algorithm::vae_dg_swad; }
bool uses_fishr(Algorithm a) { return a == Algorithm::fishr || a == Algorithm::drgen; }
bool uses_swad(Algorithm a) { return a == Algorithm::swad || a == Algorithm::drgen || a == Algorithm::vae_dg_swad; }

double scaled_loss_weight(double full_scale_weight, int image_side, int channels) {
  return full_scale_weight * (double(image_side) * image_side * channels) / kFullScalePixels;
}

ExperimentConfig ExperimentConfig::desk() { return defaults(Scale::desk, Algorithm::vae_dg); }
ExperimentConfig ExperimentConfig::full() { return defaults(Scale::full, Algorithm::vae_dg); }

ExperimentConfig ExperimentConfig::defaults(Scale scale, Algorithm algorithm) {
  ExperimentConfig c;
  c.scale = scale;
  c.algorithm = algorithm;
  if (scale == Scale::full) {
    c.steps = 15000;
    c.learning_rate = 1e-4;
    c.eval_every = 300;
    c.image_side = 224;
    c.conv_channels = {16, 32, 64, 128, 256};
    c.fishr_warmup = 1500;
  }
  if (algorithm == Algorithm::drgen) c.learning_rate = scale == Scale::full ? 5e-4 : 5e-3;
  c.beta = scaled_loss_weight(kFullScaleLossWeight, c.image_side, c.channels);
  c.alpha = c.beta;
  return c;
}

double ExperimentConfig::effective_beta() const {
  return kl_reduction == KlReduction::mean ? beta / latent_dim : beta;
}

ModelConfig ExperimentConfig::model_config() const {
  ModelConfig m;
  m.latent_dim = latent_dim;
  m.image_side = image_side;
  m.channels = channels;
  m.num_classes = num_classes;
  m.conv_channels = conv_channels;
  m.head_hidden = head_hidden;
  m.backbone = backbone;
  m.latent_mode = latent_mode;
  return m;
}

void ExperimentConfig::validate() const {
  require(steps >= 0, "steps must be nonnegative");
  require(learning_rate > 0.0, "learning_rate must be positive");
  require(per_domain > 0, "per_domain must be positive");
  require(beta >= 0.0 && alpha >= 0.0 && recon_weight >= 0.0, "loss weights must be nonnegative");
  require(val_fraction > 0.0 && val_fraction < 1.0, "val_fraction must be in (0, 1)");
  require(eval_every > 0, "eval_every must be positive");
  require(fishr_lambda >= 0.0, "fishr_lambda must be nonnegative");
  require(fishr_ema > 0.0 && fishr_ema < 1.0, "fishr_ema must be in (0, 1)");
  require(fishr_warmup >= 0, "fishr_warmup must be nonnegative");
  require(swad_start_fraction >= 0.0 && swad_start_fraction <= 1.0, "swad_start_fraction must be in [0, 1]");
  require(num_domains >= 2 || !manifests.empty(), "need at least 2 domains");
  require(domain_size > 0, "domain_size must be positive");
  require(target_domain >= 0, "target_domain must be nonnegative");
  require(!manifests.empty() || target_domain < num_domains, "target_domain must name one of the synthetic domains");
  require(!variant.empty() && variant.find_first_of(",\n/ ") == std::string::npos,
          "variant must be a nonempty token without commas, slashes or spaces");
  model_config().validate();
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  require(r.ec == std::errc() && r.ptr == s.data() + s.size(), "key '" + key + "': not a number: '" + s + "'");
  return v;
}

long parse_long(const std::string& key, const std::string& s) {
  long v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  require(r.ec == std::errc() && r.ptr == s.data() + s.size(), "key '" + key + "': not an integer: '" + s + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw InvalidInput("key '" + key + "': not a boolean: '" + s + "'");
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::vector<int> parse_ints(const std::string& key, const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(parse_long(key, item)));
  return out;
}

struct Field {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
};

#define VAEDG_FIELD_D(name) \
  {#name, {[](const ExperimentConfig& c) { return fmt_double(c.name); }, \
           [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.name = parse_double(k, v); }}}
#define VAEDG_FIELD_L(name) \
  {#name, {[](const ExperimentConfig& c) { return std::to_string(c.name); }, \
           [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.name = static_cast<decltype(c.name)>(parse_long(k, v)); }}}
#define VAEDG_FIELD_B(name) \
  {#name, {[](const ExperimentConfig& c) { return std::string(c.name ? "true" : "false"); }, \
           [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.name = parse_bool(k, v); }}}
#define VAEDG_FIELD_E(name, parse) \
  {#name, {[](const ExperimentConfig& c) { return std::string(to_string(c.name)); }, \
           [](ExperimentConfig& c, const std::string&, const std::string& v) { c.name = parse(v); }}}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      VAEDG_FIELD_E(scale, parse_scale),
      VAEDG_FIELD_E(algorithm, parse_algorithm),
      {"variant", {[](const ExperimentConfig& c) { return c.variant; },
                   [](ExperimentConfig& c, const std::string&, const std::string& v) { c.variant = v; }}},
      VAEDG_FIELD_L(target_domain),
      VAEDG_FIELD_L(steps),
      VAEDG_FIELD_D(learning_rate),
      VAEDG_FIELD_E(optimizer, parse_optimizer),
      VAEDG_FIELD_L(per_domain),
      VAEDG_FIELD_L(latent_dim),
      VAEDG_FIELD_D(beta),
      VAEDG_FIELD_D(alpha),
      VAEDG_FIELD_D(recon_weight),
      VAEDG_FIELD_E(kl_reduction, parse_kl_reduction),
      VAEDG_FIELD_D(val_fraction),
      {"seed", {[](const ExperimentConfig& c) { return std::to_string(c.seed); },
                [](ExperimentConfig& c, const std::string& k, const std::string& v) {
                  const long s = parse_long(k, v);
                  require(s >= 0, "seed must be nonnegative");
                  c.seed = static_cast<std::uint64_t>(s);
                }}},
      VAEDG_FIELD_L(eval_every),
      VAEDG_FIELD_E(latent_mode, parse_latent_mode),
      VAEDG_FIELD_B(alternate_optimization),
      VAEDG_FIELD_E(resample, parse_resample_mode),
      VAEDG_FIELD_D(fishr_lambda),
      VAEDG_FIELD_D(fishr_ema),
      VAEDG_FIELD_L(fishr_warmup),
      VAEDG_FIELD_D(swad_start_fraction),
      VAEDG_FIELD_L(image_side),
      VAEDG_FIELD_L(channels),
      VAEDG_FIELD_L(num_classes),
      VAEDG_FIELD_L(head_hidden),
      {"conv_channels", {[](const ExperimentConfig& c) { return join_ints(c.conv_channels); },
                         [](ExperimentConfig& c, const std::string& k, const std::string& v) {
                           c.conv_channels = parse_ints(k, v);
                         }}},
      VAEDG_FIELD_E(backbone, parse_backbone),
      VAEDG_FIELD_L(num_domains),
      VAEDG_FIELD_L(domain_size),
      VAEDG_FIELD_B(domain_shift),
      {"data_seed", {[](const ExperimentConfig& c) { return std::to_string(c.data_seed); },
                     [](ExperimentConfig& c, const std::string& k, const std::string& v) {
                       const long s = parse_long(k, v);
                       require(s >= 0, "data_seed must be nonnegative");
                       c.data_seed = static_cast<std::uint64_t>(s);
                     }}},
      {"manifests", {[](const ExperimentConfig& c) { return c.manifests; },
                     [](ExperimentConfig& c, const std::string&, const std::string& v) { c.manifests = v; }}},
  };
  return table;
}

#undef VAEDG_FIELD_D
#undef VAEDG_FIELD_L
#undef VAEDG_FIELD_B
#undef VAEDG_FIELD_E

}  // namespace

std::map<std::string, std::string> ExperimentConfig::to_kv() const {
  std::map<std::string, std::string> out;
  for (const auto& [key, field] : fields()) out[key] = field.get(*this);
  return out;
}

ExperimentConfig ExperimentConfig::from_kv(const std::map<std::string, std::string>& kv) {
  return from_kv(kv, desk());
}

ExperimentConfig ExperimentConfig::from_kv(const std::map<std::string, std::string>& kv, ExperimentConfig base) {
  for (const auto& [key, value] : kv)
    require(fields().contains(key), "unknown config key: " + key);
  const bool rescale = kv.contains("scale") || kv.contains("algorithm");
  if (rescale) {
    const Scale s = kv.contains("scale") ? parse_scale(kv.at("scale")) : base.scale;
    const Algorithm a = kv.contains("algorithm") ? parse_algorithm(kv.at("algorithm")) : base.algorithm;
    const auto d = defaults(s, a);
    if (s != base.scale) {
      base = d;
    } else {
      base.algorithm = a;
      base.learning_rate = d.learning_rate;
    }
  }
  for (const auto& [key, value] : kv) {
    if (key == "scale" || key == "algorithm") continue;
    fields().at(key).set(base, key, value);
  }
  // Loss weights follow the image size unless given explicitly.
  if (!kv.contains("beta") && (kv.contains("image_side") || kv.contains("channels")))
    base.beta = scaled_loss_weight(kFullScaleLossWeight, base.image_side, base.channels);
  if (!kv.contains("alpha") && (kv.contains("image_side") || kv.contains("channels")))
    base.alpha = scaled_loss_weight(kFullScaleLossWeight, base.image_side, base.channels);
  return base;
}

std::string ExperimentConfig::canonical_text() const {
  std::string out;
  for (const auto& [key, value] : to_kv()) out += key + "=" + value + "\n";
  return out;
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string ExperimentConfig::digest() const { return fnv1a_hex(canonical_text()); }

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  while (std::getline(ss, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "config line " + std::to_string(line_no) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    require(!key.empty(), "config line " + std::to_string(line_no) + ": empty key");
    require(!out.contains(key), "config line " + std::to_string(line_no) + ": duplicate key " + key);
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

std::map<std::string, std::string> read_kv_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_kv_text(ss.str());
}

std::vector<std::string> config_delta(const ExperimentConfig& a, const ExperimentConfig& b) {
  const auto ka = a.to_kv();
  const auto kb = b.to_kv();
  std::vector<std::string> out;
  for (const auto& [key, value] : ka)
    if (kb.at(key) != value) out.push_back(key);
  return out;
}

std::vector<std::string> ablation_presets() {
  return {"latent-dim-64",     "latent-dim-128",     "latent-dim-256", "fixed-latent", "beta-alpha-10000",
          "beta-alpha-50000",  "beta-alpha-100000",  "no-recon",       "no-kl",        "swad"};
}

ExperimentConfig apply_preset(const ExperimentConfig& base, const std::string& preset) {
  ExperimentConfig c = base;
  c.variant = preset;
  if (preset.starts_with("latent-dim-")) {
    c.latent_dim = static_cast<int>(parse_long("preset", preset.substr(11)));
    require(c.latent_dim == 64 || c.latent_dim == 128 || c.latent_dim == 256, "unknown preset: " + preset);
  } else if (preset == "fixed-latent") {
    c.latent_mode = LatentMode::fixed_mu;
  } else if (preset.starts_with("beta-alpha-")) {
    const double w = parse_double("preset", preset.substr(11));
    require(w == 10000.0 || w == 50000.0 || w == 100000.0, "unknown preset: " + preset);
    c.beta = scaled_loss_weight(w, c.image_side, c.channels);
    c.alpha = c.beta;
  } else if (preset == "no-recon") {
    c.recon_weight = 0.0;
  } else if (preset == "no-kl") {
    c.beta = 0.0;
  } else if (preset == "swad") {
    if (c.algorithm == Algorithm::vae_dg)
      c.algorithm = Algorithm::vae_dg_swad;
    else if (c.algorithm == Algorithm::erm)
      c.algorithm = Algorithm::swad;
    else
      throw InvalidInput("swad preset applies to vae_dg or erm, not " + std::string(to_string(c.algorithm)));
  } else {
    throw InvalidInput("unknown preset: " + preset);
  }
  return c;
}

}  // namespace vaedg
