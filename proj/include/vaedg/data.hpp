#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vaedg/rng.hpp"
#include "vaedg/tensor.hpp"

namespace vaedg {

inline constexpr int kDefaultNumClasses = 5;

/// One image (H x W x C, values in [0, 1]) with its grade and source domain.
struct LabeledExample {
  std::vector<float> image;
  int label = 0;
  int domain_id = 0;
  /// Manifest path the image came from; empty for generated data.
  std::string source;

  bool operator==(const LabeledExample&) const = default;
};

struct DomainDataset {
  int domain_id = 0;
  std::string name;
  int image_side = 32;
  int channels = 3;
  int num_classes = kDefaultNumClasses;
  std::vector<LabeledExample> examples;
  std::vector<int> class_counts;

  void recount();
  /// Checks nonemptiness, label range, pixel range, domain ids and class_counts.
  void validate() const;
  std::size_t size() const { return examples.size(); }
  bool operator==(const DomainDataset&) const = default;
};

/// Acquisition differences of one domain.
struct PhotometricShift {
  double brightness = 0.0;   // additive offset
  double contrast = 1.0;     // gain around mid-grey
  double hue_degrees = 0.0;  // rotation about the grey axis
  int blur_radius = 0;       // box blur half-width in pixels
  double vignette = 0.0;     // radial darkening strength in [0, 1)

  bool operator==(const PhotometricShift&) const = default;
};

/// Lesion counts that define a grade. Shared by all domains.
struct ClassSignal {
  int bright_blobs = 0;
  int dark_blobs = 0;
};

struct ShiftSpec {
  int image_side = 32;
  int channels = 3;
  std::vector<ClassSignal> classes;
  /// Label prior used after each present class has been seeded once.
  std::vector<double> class_prior;
  std::vector<PhotometricShift> domains;
  /// masked_classes[d] lists grades that never occur in domain d.
  std::vector<std::vector<int>> masked_classes;
  double pixel_noise = 0.02;

  /// Five monotone grades, an imbalanced prior, and distinct photometrics
  /// for each domain (all identical when shift is false).
  static ShiftSpec desk_default(int num_domains, bool shift = true, std::uint64_t seed = 0);
  void validate(int num_domains) const;
};

std::vector<std::string> default_domain_names(int num_domains);

/// Renders one example of `label` for `domain` with instance randomness
/// taken from `instance_seed`. The lesion layout depends only on
/// (label, instance_seed); the domain only changes photometrics.
std::vector<float> render_synthetic_image(const ShiftSpec& spec, int label, int domain, std::uint64_t instance_seed);

/// Applies a domain's photometric transform to an H x W x C image in place.
void apply_photometric_shift(const PhotometricShift& shift, int side, int channels, std::vector<float>& image);

/// Deterministic multi-domain generation; example i of domain d draws from
/// an independent stream keyed by (seed, d, i).
std::vector<DomainDataset> generate_synthetic_domains(const ShiftSpec& spec, int num_domains, int per_domain_count,
                                                      std::uint64_t seed);

struct ManifestOptions {
  int image_side = 32;
  int channels = 3;
  int num_classes = kDefaultNumClasses;
  int domain_id = 0;
};

/// Reads a `path,label,domain` manifest; relative image paths resolve
/// against the manifest's directory. All rows must share one domain value.
DomainDataset load_manifest(const std::filesystem::path& path, const ManifestOptions& options = {});

/// Writes a manifest for examples that carry a source path.
void write_manifest(const DomainDataset& dataset, const std::filesystem::path& path);

/// Writes every image as PNG under dir and a manifest.csv referencing them.
/// Returns the manifest path.
std::filesystem::path export_dataset(const DomainDataset& dataset, const std::filesystem::path& dir);

enum class ResampleMode { class_balanced, uniform };
const char* to_string(ResampleMode m);
ResampleMode parse_resample_mode(const std::string& s);

/// Infinite stream of example indices. class_balanced picks a present class
/// uniformly, then an example of that class uniformly, with replacement.
class ClassBalancedStream {
 public:
  ClassBalancedStream(const DomainDataset& dataset, std::uint64_t seed,
                      ResampleMode mode = ResampleMode::class_balanced);
  std::size_t next();
  const DomainDataset& dataset() const { return *dataset_; }

 private:
  const DomainDataset* dataset_;
  ResampleMode mode_;
  Rng rng_;
  std::vector<std::vector<std::size_t>> by_class_;
};

/// Images as [B, C, H, W] with labels and domain ids.
struct Batch {
  Tensor<float> images;
  std::vector<int> labels;
  std::vector<int> domains;
  int size() const { return static_cast<int>(labels.size()); }
};

/// Draws per_domain examples from every stream and concatenates them in stream order.
Batch pooled_batch(std::span<ClassBalancedStream> streams, int per_domain);

/// Packs examples into a batch tensor (HWC -> CHW).
Batch make_batch(std::span<const LabeledExample* const> examples, int side, int channels);
Batch make_batch(const DomainDataset& dataset);

}  // namespace vaedg
