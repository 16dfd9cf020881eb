#include "vaedg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <sstream>

#include "vaedg/errors.hpp"

namespace vaedg {

void DomainDataset::recount() {
  class_counts.assign(num_classes, 0);
  for (const auto& e : examples)
    if (e.label >= 0 && e.label < num_classes) ++class_counts[e.label];
}

void DomainDataset::validate() const {
  require(!examples.empty(), "empty dataset");
  require(num_classes >= 2, "dataset needs at least 2 classes");
  const std::size_t pixels = std::size_t(image_side) * image_side * channels;
  std::vector<int> counts(num_classes, 0);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    require(e.label >= 0 && e.label < num_classes,
            "example " + std::to_string(i) + " has label " + std::to_string(e.label) + " outside [0, " +
                std::to_string(num_classes) + ")");
    require(e.domain_id == domain_id, "example " + std::to_string(i) + " belongs to domain " +
                                          std::to_string(e.domain_id) + ", not " + std::to_string(domain_id));
    require(e.image.size() == pixels, "example " + std::to_string(i) + " has the wrong pixel count");
    for (float p : e.image)
      require(std::isfinite(p) && p >= 0.0f && p <= 1.0f, "example " + std::to_string(i) + " has a pixel outside [0, 1]");
    ++counts[e.label];
  }
  require(counts == class_counts, "class_counts do not match the examples");
}

// ---------------------------------------------------------------- synthetic generation

std::vector<std::string> default_domain_names(int num_domains) {
  std::vector<std::string> names;
  for (int d = 0; d < num_domains; ++d) names.push_back("synth" + std::to_string(d));
  return names;
}

ShiftSpec ShiftSpec::desk_default(int num_domains, bool shift, std::uint64_t seed) {
  ShiftSpec spec;
  for (int k = 0; k < kDefaultNumClasses; ++k) spec.classes.push_back({4 * k, 3 * k});
  spec.class_prior = {0.40, 0.20, 0.18, 0.12, 0.10};
  spec.masked_classes.assign(num_domains, {});
  const std::vector<PhotometricShift> presets{
      {0.00, 1.00, 0.0, 0, 0.00},
      {0.08, 0.80, 20.0, 1, 0.30},
      {-0.06, 1.20, -25.0, 0, 0.50},
      {0.03, 0.90, 45.0, 1, 0.15},
  };
  for (int d = 0; d < num_domains; ++d) {
    if (!shift) {
      spec.domains.push_back({});
    } else if (d < static_cast<int>(presets.size())) {
      spec.domains.push_back(presets[d]);
    } else {
      Rng rng(counter_seed(seed, 0x5417, d));
      PhotometricShift s;
      s.brightness = rng.uniform(-0.08, 0.08);
      s.contrast = rng.uniform(0.75, 1.25);
      s.hue_degrees = rng.uniform(-50.0, 50.0);
      s.blur_radius = static_cast<int>(rng.below(2));
      s.vignette = rng.uniform(0.0, 0.5);
      spec.domains.push_back(s);
    }
  }
  return spec;
}

void ShiftSpec::validate(int num_domains) const {
  require(image_side > 0 && channels > 0, "synthetic image size must be positive");
  require(channels == 1 || channels == 3, "synthetic images have 1 or 3 channels");
  require(classes.size() >= 2, "ShiftSpec needs at least 2 classes");
  require(class_prior.size() == classes.size(), "class prior must have one entry per class");
  for (double p : class_prior) require(p > 0.0, "class prior entries must be positive");
  for (const auto& c : classes) require(c.bright_blobs >= 0 && c.dark_blobs >= 0, "lesion counts must be nonnegative");
  require(static_cast<int>(domains.size()) >= num_domains, "ShiftSpec has fewer domains than requested");
  for (const auto& d : domains) {
    require(d.contrast > 0.0, "contrast gain must be positive");
    require(d.blur_radius >= 0, "blur radius must be nonnegative");
    require(d.vignette >= 0.0 && d.vignette < 1.0, "vignette strength must be in [0, 1)");
  }
  for (std::size_t d = 0; d < masked_classes.size(); ++d) {
    for (int c : masked_classes[d])
      require(c >= 0 && c < static_cast<int>(classes.size()), "masked class out of range");
    require(masked_classes[d].size() < classes.size(), "a domain cannot mask every class");
  }
}

namespace {

struct Rgb {
  double r, g, b;
};

void blend_blob(std::vector<double>& img, int side, double cx, double cy, double radius, Rgb color) {
  const int lo_y = std::max(0, static_cast<int>(std::floor(cy - 3 * radius)));
  const int hi_y = std::min(side - 1, static_cast<int>(std::ceil(cy + 3 * radius)));
  const int lo_x = std::max(0, static_cast<int>(std::floor(cx - 3 * radius)));
  const int hi_x = std::min(side - 1, static_cast<int>(std::ceil(cx + 3 * radius)));
  for (int y = lo_y; y <= hi_y; ++y) {
    for (int x = lo_x; x <= hi_x; ++x) {
      const double d2 = (x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy);
      const double a = std::exp(-d2 / (radius * radius));
      double* px = &img[(std::size_t(y) * side + x) * 3];
      px[0] = (1 - a) * px[0] + a * color.r;
      px[1] = (1 - a) * px[1] + a * color.g;
      px[2] = (1 - a) * px[2] + a * color.b;
    }
  }
}

// Uniform point in a disc of the given radius.
std::pair<double, double> point_in_disc(Rng& rng, double cx, double cy, double radius) {
  const double r = radius * std::sqrt(rng.uniform());
  const double t = 2.0 * std::numbers::pi * rng.uniform();
  return {cx + r * std::cos(t), cy + r * std::sin(t)};
}

std::vector<float> finalize(const std::vector<double>& rgb, int side, int channels) {
  std::vector<float> out(std::size_t(side) * side * channels);
  for (std::size_t i = 0; i < std::size_t(side) * side; ++i) {
    if (channels == 3) {
      for (int c = 0; c < 3; ++c) out[i * 3 + c] = static_cast<float>(std::clamp(rgb[i * 3 + c], 0.0, 1.0));
    } else {
      const double lum = 0.299 * rgb[i * 3] + 0.587 * rgb[i * 3 + 1] + 0.114 * rgb[i * 3 + 2];
      out[i] = static_cast<float>(std::clamp(lum, 0.0, 1.0));
    }
  }
  return out;
}

}  // namespace

std::vector<float> render_synthetic_image(const ShiftSpec& spec, int label, int domain, std::uint64_t instance_seed) {
  require(label >= 0 && label < static_cast<int>(spec.classes.size()), "label has no class signal");
  require(domain >= 0 && domain < static_cast<int>(spec.domains.size()), "domain has no photometric shift");
  const int side = spec.image_side;
  Rng rng(instance_seed);
  std::vector<double> img(std::size_t(side) * side * 3, 0.0);

  const double cx = side / 2.0 + rng.uniform(-1.0, 1.0);
  const double cy = side / 2.0 + rng.uniform(-1.0, 1.0);
  const double radius = 0.44 * side * rng.uniform(0.97, 1.03);
  const Rgb base{0.75 + rng.uniform(-0.03, 0.03), 0.32 + rng.uniform(-0.03, 0.03), 0.12 + rng.uniform(-0.02, 0.02)};
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double r2 = (dx * dx + dy * dy) / (radius * radius);
      if (r2 > 1.0) continue;
      const double shade = 1.0 - 0.25 * r2;
      double* px = &img[(std::size_t(y) * side + x) * 3];
      px[0] = base.r * shade;
      px[1] = base.g * shade;
      px[2] = base.b * shade;
    }
  }

  // Optic disc.
  const double angle = 2.0 * std::numbers::pi * rng.uniform();
  blend_blob(img, side, cx + 0.45 * radius * std::cos(angle), cy + 0.45 * radius * std::sin(angle), 0.09 * side,
             {0.95, 0.85, 0.60});

  const auto& signal = spec.classes[label];
  const double scale = side / 32.0;
  for (int i = 0; i < signal.bright_blobs; ++i) {
    const auto [x, y] = point_in_disc(rng, cx, cy, 0.8 * radius);
    blend_blob(img, side, x, y, rng.uniform(0.9, 1.5) * scale, {1.0, 0.95, 0.55});
  }
  for (int i = 0; i < signal.dark_blobs; ++i) {
    const auto [x, y] = point_in_disc(rng, cx, cy, 0.8 * radius);
    blend_blob(img, side, x, y, rng.uniform(0.8, 1.4) * scale, {0.25, 0.03, 0.03});
  }
  for (auto& v : img) v += spec.pixel_noise * rng.normal();
  for (auto& v : img) v = std::clamp(v, 0.0, 1.0);

  auto out = finalize(img, side, spec.channels);
  apply_photometric_shift(spec.domains[domain], side, spec.channels, out);
  return out;
}

void apply_photometric_shift(const PhotometricShift& shift, int side, int channels, std::vector<float>& image) {
  require(image.size() == std::size_t(side) * side * channels, "image size does not match side and channels");
  const std::size_t n = std::size_t(side) * side;
  std::vector<double> px(image.begin(), image.end());

  if (channels == 3 && shift.hue_degrees != 0.0) {
    const double t = shift.hue_degrees * std::numbers::pi / 180.0;
    const double c = std::cos(t), s = std::sin(t), k = (1.0 - c) / 3.0, q = std::sqrt(1.0 / 3.0) * s;
    const double m[3][3] = {{c + k, k - q, k + q}, {k + q, c + k, k - q}, {k - q, k + q, c + k}};
    for (std::size_t i = 0; i < n; ++i) {
      const double r = px[i * 3], g = px[i * 3 + 1], b = px[i * 3 + 2];
      for (int ch = 0; ch < 3; ++ch) px[i * 3 + ch] = m[ch][0] * r + m[ch][1] * g + m[ch][2] * b;
    }
  }

  if (shift.blur_radius > 0) {
    const int rad = shift.blur_radius;
    std::vector<double> tmp(px.size());
    for (int pass = 0; pass < 2; ++pass) {
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
          for (int ch = 0; ch < channels; ++ch) {
            double acc = 0.0;
            for (int o = -rad; o <= rad; ++o) {
              const int xx = pass == 0 ? std::clamp(x + o, 0, side - 1) : x;
              const int yy = pass == 1 ? std::clamp(y + o, 0, side - 1) : y;
              acc += px[(std::size_t(yy) * side + xx) * channels + ch];
            }
            tmp[(std::size_t(y) * side + x) * channels + ch] = acc / (2 * rad + 1);
          }
      px.swap(tmp);
    }
  }

  const double half = side / 2.0;
  const double max_r2 = 2.0 * half * half;
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double dx = x + 0.5 - half, dy = y + 0.5 - half;
      const double v = 1.0 - shift.vignette * (dx * dx + dy * dy) / max_r2;
      for (int ch = 0; ch < channels; ++ch) {
        double& p = px[(std::size_t(y) * side + x) * channels + ch];
        p = ((p - 0.5) * shift.contrast + 0.5 + shift.brightness) * v;
      }
    }
  }
  for (std::size_t i = 0; i < image.size(); ++i) image[i] = static_cast<float>(std::clamp(px[i], 0.0, 1.0));
}

std::vector<DomainDataset> generate_synthetic_domains(const ShiftSpec& spec, int num_domains, int per_domain_count,
                                                      std::uint64_t seed) {
  require(num_domains >= 2, "need at least 2 domains");
  const int num_classes = static_cast<int>(spec.classes.size());
  require(per_domain_count >= num_classes, "per_domain_count must be at least the number of classes");
  spec.validate(num_domains);
  const auto names = default_domain_names(num_domains);

  std::vector<DomainDataset> out;
  for (int d = 0; d < num_domains; ++d) {
    DomainDataset ds;
    ds.domain_id = d;
    ds.name = names[d];
    ds.image_side = spec.image_side;
    ds.channels = spec.channels;
    ds.num_classes = num_classes;

    std::vector<int> present;
    std::vector<double> prior;
    const auto& masked = d < static_cast<int>(spec.masked_classes.size()) ? spec.masked_classes[d] : std::vector<int>{};
    for (int c = 0; c < num_classes; ++c) {
      if (std::find(masked.begin(), masked.end(), c) != masked.end()) continue;
      present.push_back(c);
      prior.push_back(spec.class_prior[c]);
    }
    double total = 0.0;
    for (double p : prior) total += p;

    for (int i = 0; i < per_domain_count; ++i) {
      Rng rng(counter_seed(seed, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(i)));
      int label;
      if (i < static_cast<int>(present.size())) {
        label = present[i];
      } else {
        double u = rng.uniform() * total;
        std::size_t k = 0;
        while (k + 1 < prior.size() && u >= prior[k]) u -= prior[k++];
        label = present[k];
      }
      LabeledExample ex;
      ex.label = label;
      ex.domain_id = d;
      ex.image = render_synthetic_image(spec, label, d, rng.next());
      ds.examples.push_back(std::move(ex));
    }
    ds.recount();
    out.push_back(std::move(ds));
  }
  return out;
}

// ---------------------------------------------------------------- manifests

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) fields.push_back(trim(f));
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::vector<float> load_image(const std::filesystem::path& path, int side, int channels) {
  cv::Mat img = cv::imread(path.string(), channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (img.empty()) throw InvalidInput("unreadable image " + path.string());
  if (channels == 3) cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
  if (img.rows != side || img.cols != side) {
    const int interp = img.rows > side ? cv::INTER_AREA : cv::INTER_LINEAR;
    cv::resize(img, img, cv::Size(side, side), 0, 0, interp);
  }
  cv::Mat f;
  img.convertTo(f, channels == 1 ? CV_32FC1 : CV_32FC3, 1.0 / 255.0);
  std::vector<float> out(std::size_t(side) * side * channels);
  for (int y = 0; y < side; ++y) {
    const float* row = f.ptr<float>(y);
    std::copy_n(row, std::size_t(side) * channels, out.begin() + std::size_t(y) * side * channels);
  }
  for (auto& v : out) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

}  // namespace

DomainDataset load_manifest(const std::filesystem::path& path, const ManifestOptions& options) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw InvalidInput(path.string() + ": empty dataset");
  const auto header = split_row(line);
  if (header != std::vector<std::string>{"path", "label", "domain"})
    throw InvalidInput(path.string() + " line 1: header must be path,label,domain");

  DomainDataset ds;
  ds.domain_id = options.domain_id;
  ds.image_side = options.image_side;
  ds.channels = options.channels;
  ds.num_classes = options.num_classes;
  const auto base = path.parent_path();
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto where = path.string() + " line " + std::to_string(line_no) + ": ";
    const auto fields = split_row(line);
    if (fields.size() != 3) throw InvalidInput(where + "expected 3 fields, got " + std::to_string(fields.size()));
    int label = -1;
    try {
      std::size_t used = 0;
      label = std::stoi(fields[1], &used);
      if (used != fields[1].size()) label = -1;
    } catch (const std::exception&) {
      label = -1;
    }
    if (label < 0 || label >= options.num_classes)
      throw InvalidInput(where + "label '" + fields[1] + "' not in [0, " + std::to_string(options.num_classes) + ")");
    if (fields[2].empty()) throw InvalidInput(where + "empty domain");
    if (ds.name.empty())
      ds.name = fields[2];
    else if (fields[2] != ds.name)
      throw InvalidInput(where + "domain '" + fields[2] + "' differs from '" + ds.name + "'");
    std::filesystem::path img_path = fields[0];
    if (img_path.is_relative()) img_path = base / img_path;
    LabeledExample ex;
    try {
      ex.image = load_image(img_path, options.image_side, options.channels);
    } catch (const InvalidInput& e) {
      throw InvalidInput(where + e.what());
    }
    ex.label = label;
    ex.domain_id = options.domain_id;
    ex.source = fields[0];
    ds.examples.push_back(std::move(ex));
  }
  if (ds.examples.empty()) throw InvalidInput(path.string() + ": empty dataset");
  ds.recount();
  return ds;
}

void write_manifest(const DomainDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write manifest " + path.string());
  out << "path,label,domain\n";
  for (std::size_t i = 0; i < dataset.examples.size(); ++i) {
    const auto& e = dataset.examples[i];
    require(!e.source.empty(), "example " + std::to_string(i) + " has no source path");
    out << e.source << ',' << e.label << ',' << dataset.name << '\n';
  }
}

std::filesystem::path export_dataset(const DomainDataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  DomainDataset copy = dataset;
  const int side = dataset.image_side;
  const int ch = dataset.channels;
  for (std::size_t i = 0; i < copy.examples.size(); ++i) {
    auto& e = copy.examples[i];
    cv::Mat img(side, side, ch == 1 ? CV_8UC1 : CV_8UC3);
    for (int y = 0; y < side; ++y) {
      auto* row = img.ptr<unsigned char>(y);
      for (int j = 0; j < side * ch; ++j)
        row[j] = static_cast<unsigned char>(std::lround(std::clamp(e.image[std::size_t(y) * side * ch + j], 0.0f, 1.0f) * 255.0f));
    }
    if (ch == 3) cv::cvtColor(img, img, cv::COLOR_RGB2BGR);
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05zu.png", i);
    if (!cv::imwrite((dir / name).string(), img)) throw InvalidInput("cannot write image " + (dir / name).string());
    e.source = name;
  }
  const auto manifest = dir / "manifest.csv";
  write_manifest(copy, manifest);
  return manifest;
}

// ---------------------------------------------------------------- sampling

const char* to_string(ResampleMode m) { return m == ResampleMode::class_balanced ? "class_balanced" : "uniform"; }

ResampleMode parse_resample_mode(const std::string& s) {
  if (s == "class_balanced") return ResampleMode::class_balanced;
  if (s == "uniform") return ResampleMode::uniform;
  throw InvalidInput("unknown resample mode: " + s);
}

ClassBalancedStream::ClassBalancedStream(const DomainDataset& dataset, std::uint64_t seed, ResampleMode mode)
    : dataset_(&dataset), mode_(mode), rng_(seed) {
  require(!dataset.examples.empty(), "empty dataset");
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < dataset.examples.size(); ++i) groups[dataset.examples[i].label].push_back(i);
  for (auto& [label, idx] : groups) by_class_.push_back(std::move(idx));
}

std::size_t ClassBalancedStream::next() {
  if (mode_ == ResampleMode::uniform) return static_cast<std::size_t>(rng_.below(dataset_->examples.size()));
  const auto& members = by_class_[rng_.below(by_class_.size())];
  return members[rng_.below(members.size())];
}

Batch make_batch(std::span<const LabeledExample* const> examples, int side, int channels) {
  Batch batch;
  const int n = static_cast<int>(examples.size());
  batch.images = Tensor<float>({n, channels, side, side});
  const std::size_t plane = std::size_t(side) * side;
  for (int b = 0; b < n; ++b) {
    const auto& e = *examples[b];
    require(e.image.size() == plane * channels, "example image size does not match the batch geometry");
    float* dst = batch.images.ptr() + std::size_t(b) * plane * channels;
    for (std::size_t p = 0; p < plane; ++p)
      for (int c = 0; c < channels; ++c) dst[c * plane + p] = e.image[p * channels + c];
    batch.labels.push_back(e.label);
    batch.domains.push_back(e.domain_id);
  }
  return batch;
}

Batch make_batch(const DomainDataset& dataset) {
  std::vector<const LabeledExample*> ptrs;
  for (const auto& e : dataset.examples) ptrs.push_back(&e);
  return make_batch(ptrs, dataset.image_side, dataset.channels);
}

Batch pooled_batch(std::span<ClassBalancedStream> streams, int per_domain) {
  require(per_domain > 0, "per_domain must be positive");
  require(!streams.empty(), "pooled_batch needs at least one source stream");
  std::vector<const LabeledExample*> picked;
  for (auto& s : streams)
    for (int i = 0; i < per_domain; ++i) picked.push_back(&s.dataset().examples[s.next()]);
  const auto& first = streams.front().dataset();
  return make_batch(picked, first.image_side, first.channels);
}

}  // namespace vaedg
