#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vaedg/data.hpp"
#include "vaedg/model.hpp"

namespace vaedg {

enum class Algorithm { vae_dg, erm, fishr, swad, drgen, vae_dg_swad };
enum class OptimizerKind { adam, sgd };
enum class Scale { desk, full };
/// How the KL term is weighted against the latent size: `sum` applies beta to
/// the KL summed over dimensions, `mean` applies beta / latent_dim.
enum class KlReduction { sum, mean };

const char* to_string(Algorithm a);
const char* to_string(OptimizerKind o);
const char* to_string(Scale s);
const char* to_string(KlReduction k);
Algorithm parse_algorithm(const std::string& s);
OptimizerKind parse_optimizer(const std::string& s);
Scale parse_scale(const std::string& s);
KlReduction parse_kl_reduction(const std::string& s);

/// True for algorithms trained with the VAE objective (decoder + KL).
bool uses_vae_objective(Algorithm a);
bool uses_fishr(Algorithm a);
bool uses_swad(Algorithm a);

/// Pixel-channel count of a 224 x 224 x 3 fundus image.
inline constexpr double kFullScalePixels = 224.0 * 224.0 * 3.0;
/// Default beta and alpha at full resolution.
inline constexpr double kFullScaleLossWeight = 50000.0;

/// Rescales a full-resolution loss weight to this image size so the KL and
/// classification terms keep the same balance against the pixel-summed
/// reconstruction term.
double scaled_loss_weight(double full_scale_weight, int image_side, int channels);

struct ExperimentConfig {
  Scale scale = Scale::desk;
  Algorithm algorithm = Algorithm::vae_dg;
  std::string variant = "base";
  int target_domain = 0;
  long steps = 2000;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  int per_domain = 22;
  int latent_dim = 256;
  double beta = 0.0;
  double alpha = 0.0;
  double recon_weight = 1.0;
  KlReduction kl_reduction = KlReduction::mean;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
  long eval_every = 100;
  LatentMode latent_mode = LatentMode::sampled;
  bool alternate_optimization = false;
  ResampleMode resample = ResampleMode::class_balanced;

  double fishr_lambda = 1000.0;
  double fishr_ema = 0.95;
  long fishr_warmup = 300;
  double swad_start_fraction = 0.5;

  int image_side = 32;
  int channels = 3;
  int num_classes = kDefaultNumClasses;
  int head_hidden = 64;
  std::vector<int> conv_channels{8, 16, 32};
  BackboneKind backbone = BackboneKind::small_cnn;

  int num_domains = 4;
  int domain_size = 200;
  bool domain_shift = true;
  std::uint64_t data_seed = 0;
  /// Comma-separated manifest paths; empty selects synthetic domains.
  std::string manifests;

  static ExperimentConfig desk();
  static ExperimentConfig full();
  /// Scale defaults with per-algorithm overrides (learning rate, loss weights).
  static ExperimentConfig defaults(Scale scale, Algorithm algorithm);

  ModelConfig model_config() const;
  /// Weight multiplying the summed KL in the objective.
  double effective_beta() const;
  void validate() const;

  std::map<std::string, std::string> to_kv() const;
  /// Applies key-value overrides. `scale` and `algorithm` are applied first and
  /// reset dependent defaults; unknown keys are errors.
  static ExperimentConfig from_kv(const std::map<std::string, std::string>& kv);
  static ExperimentConfig from_kv(const std::map<std::string, std::string>& kv, ExperimentConfig base);

  /// Sorted `key=value` lines.
  std::string canonical_text() const;
  /// 16 hex digits of FNV-1a over canonical_text().
  std::string digest() const;

  bool operator==(const ExperimentConfig&) const = default;
};

/// Parses `key = value` lines; `#` starts a comment.
std::map<std::string, std::string> parse_kv_text(const std::string& text);
std::map<std::string, std::string> read_kv_file(const std::filesystem::path& path);

/// Keys whose canonical values differ between two configs.
std::vector<std::string> config_delta(const ExperimentConfig& a, const ExperimentConfig& b);

/// Ablation presets: latent-dim-{64,128,256}, fixed-latent,
/// beta-alpha-{10000,50000,100000}, no-recon, no-kl, swad.
std::vector<std::string> ablation_presets();
ExperimentConfig apply_preset(const ExperimentConfig& base, const std::string& preset);

std::string fnv1a_hex(const std::string& text);

}  // namespace vaedg
