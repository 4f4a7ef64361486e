#pragma once

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mpg/losses.hpp"
#include "mpg/tensor.hpp"

namespace mpg {

// Layered synthetic scans: a stack of smooth bands over a dark background,
// one intensity per band, optional Gaussian noise. Stands in for real OCT
// data with exact ground truth.
struct SynthConfig {
  int height = 64;
  int width = 128;
  int layer_count = 7;  // foreground bands; classes = layer_count + 1
  int boundary_waves = 3;
  double amp_min = 1.0;
  double amp_max = 2.5;
  std::vector<double> layer_intensity_means;  // size layer_count + 1; filled by default_means()
  double noise_sigma = 0.02;
  uint64_t seed = 1;

  // Fraction of the shared-wave amplitude budget granted to each boundary's
  // independent perturbation; bounds the worst-case gap shrinkage.
  static constexpr double kIndepScale = 0.2;

  int class_count() const { return layer_count + 1; }

  static std::vector<double> default_means(int class_count) {
    static const double kEight[8] = {0.05, 0.85, 0.30, 0.60, 0.20, 0.70, 0.40, 0.95};
    std::vector<double> m(class_count);
    for (int k = 0; k < class_count; ++k)
      m[k] = (class_count <= 8) ? kEight[k] : 0.05 + 0.9 * k / (class_count - 1);
    return m;
  }

  double total_amplitude() const { return boundary_waves * amp_max * (1.0 + kIndepScale); }
  double base_gap() const {
    const double top = 2.0 + total_amplitude();
    const double bot = height - 2.0 - total_amplitude();
    return (bot - top) / (layer_count - 1);
  }

  void validate() const {
    if (height % 8 != 0 || width % 8 != 0)
      throw ConfigError("synth height/width must be divisible by 8, got " +
                        std::to_string(height) + "x" + std::to_string(width));
    if (layer_count < 1) throw ConfigError("layer_count must be >= 1");
    if (boundary_waves < 0 || amp_min < 0 || amp_max < amp_min)
      throw ConfigError("invalid boundary smoothness settings");
    if (noise_sigma < 0) throw ConfigError("noise_sigma must be >= 0");
    const double worst = 2.0 * boundary_waves * amp_max * kIndepScale;
    if (base_gap() - worst < 2.0)
      throw ConfigError("boundary config violates the minimum 2 px layer gap: base gap " +
                        std::to_string(base_gap()) + " px minus worst-case perturbation " +
                        std::to_string(worst) + " px");
    std::vector<double> means = layer_intensity_means;
    if (means.empty()) means = default_means(class_count());
    if (static_cast<int>(means.size()) != class_count())
      throw ConfigError("layer_intensity_means must have " + std::to_string(class_count()) +
                        " entries");
    for (size_t a = 0; a < means.size(); ++a) {
      if (means[a] < 0.0 || means[a] > 1.0)
        throw ConfigError("layer intensity means must lie in [0,1]");
      for (size_t b = a + 1; b < means.size(); ++b)
        if (std::abs(means[a] - means[b]) < 0.05)
          throw ConfigError("layer intensity means must differ by at least 0.05");
    }
  }
};

struct Sample {
  int height = 0, width = 0;
  std::vector<float> image;  // grayscale in [0,1], row-major
  LabelMap labels;           // (1, H, W)
};

namespace detail {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace detail

// Deterministic per (config, sample index): sample i is the same no matter
// how many samples are requested.
inline std::vector<Sample> generate(const SynthConfig& cfg, int n) {
  cfg.validate();
  std::vector<double> means = cfg.layer_intensity_means;
  if (means.empty()) means = SynthConfig::default_means(cfg.class_count());

  const int H = cfg.height, W = cfg.width, L = cfg.layer_count;
  const double top = 2.0 + cfg.total_amplitude();
  const double gap = cfg.base_gap();

  std::vector<Sample> out;
  out.reserve(n);
  for (int idx = 0; idx < n; ++idx) {
    std::mt19937_64 rng(detail::splitmix64(cfg.seed ^ detail::splitmix64(idx + 1)));
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    struct Wave {
      double amp, freq, phase;
    };
    auto draw_wave = [&](double amp_lo, double amp_hi) {
      Wave w;
      w.amp = amp_lo + (amp_hi - amp_lo) * uni(rng);
      w.freq = 2.0 * 3.14159265358979323846 * (1.0 + std::floor(uni(rng) * 3.0)) / W;
      w.phase = 2.0 * 3.14159265358979323846 * uni(rng);
      return w;
    };

    // shared waves bend all boundaries together; the small per-boundary
    // waves stay inside the validated gap budget
    std::vector<Wave> shared(cfg.boundary_waves);
    for (auto& w : shared) w = draw_wave(cfg.amp_min, cfg.amp_max);
    std::vector<std::vector<Wave>> indep(L);
    for (auto& ws : indep) {
      ws.resize(cfg.boundary_waves);
      for (auto& w : ws) w = draw_wave(0.0, cfg.amp_max * SynthConfig::kIndepScale);
    }

    Sample s;
    s.height = H;
    s.width = W;
    s.image.assign(static_cast<size_t>(H) * W, 0.0f);
    s.labels = LabelMap::zeros(1, H, W);

    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    std::vector<int> bounds(L);
    for (int x = 0; x < W; ++x) {
      double drift = 0.0;
      for (const auto& w : shared) drift += w.amp * std::sin(w.freq * x + w.phase);
      for (int b = 0; b < L; ++b) {
        double pos = top + b * gap + drift;
        for (const auto& w : indep[b]) pos += w.amp * std::sin(w.freq * x + w.phase);
        bounds[b] = static_cast<int>(std::lround(pos));
      }
      for (int y = 0; y < H; ++y) {
        int label = 0;
        while (label < L && y >= bounds[label]) ++label;
        s.labels.at(0, y, x) = label;
        double v = means[label];
        if (cfg.noise_sigma > 0) v += noise(rng);
        s.image[static_cast<size_t>(y) * W + x] =
            static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

// --- binary PGM (P5) I/O ----------------------------------------------------

namespace detail {

inline int pgm_read_int(std::istream& is, long& offset) {
  // skip whitespace and '#' comments
  int c = is.get();
  ++offset;
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#')
      while (c != EOF && c != '\n') {
        c = is.get();
        ++offset;
      }
    c = is.get();
    ++offset;
  }
  if (c == EOF || !std::isdigit(c))
    throw DataError("malformed PGM header at byte " + std::to_string(offset - 1));
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = is.get();
    ++offset;
  }
  if (c != EOF && !std::isspace(c))
    throw DataError("malformed PGM header at byte " + std::to_string(offset - 1));
  return v;
}

inline std::vector<uint8_t> pgm_read(const std::string& path, int& h, int& w) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  long offset = 0;
  char m0 = static_cast<char>(is.get());
  char m1 = static_cast<char>(is.get());
  offset += 2;
  if (m0 != 'P' || m1 != '5') throw DataError("malformed PGM header at byte 0: not a P5 file");
  w = pgm_read_int(is, offset);
  h = pgm_read_int(is, offset);
  const int maxval = pgm_read_int(is, offset);
  if (maxval != 255)
    throw DataError("unsupported PGM maxval " + std::to_string(maxval) + " at byte " +
                    std::to_string(offset - 1));
  if (h <= 0 || w <= 0) throw DataError("invalid PGM dimensions in " + path);
  std::vector<uint8_t> bytes(static_cast<size_t>(h) * w);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<size_t>(is.gcount()) != bytes.size())
    throw DataError("truncated PGM payload at byte " + std::to_string(offset + is.gcount()));
  return bytes;
}

inline void pgm_write(const std::string& path, const uint8_t* bytes, int h, int w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os << "P5\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(bytes), static_cast<std::streamsize>(h) * w);
  if (!os) throw DataError("short write to " + path);
}

}  // namespace detail

// Images are quantized to 8 bits, round half up; labels are stored raw.
inline void write_image_pgm(const std::vector<float>& image, int h, int w,
                            const std::string& path) {
  if (static_cast<long>(image.size()) != static_cast<long>(h) * w)
    throw ConfigError("image size does not match dimensions");
  std::vector<uint8_t> bytes(image.size());
  for (size_t i = 0; i < image.size(); ++i) {
    const float v = std::clamp(image[i], 0.0f, 1.0f);
    bytes[i] = static_cast<uint8_t>(std::lround(v * 255.0f));
  }
  detail::pgm_write(path, bytes.data(), h, w);
}

inline std::vector<float> read_image_pgm(const std::string& path, int& h, int& w) {
  const std::vector<uint8_t> bytes = detail::pgm_read(path, h, w);
  std::vector<float> image(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) image[i] = bytes[i] / 255.0f;
  return image;
}

inline void write_label_pgm(const LabelMap& labels, const std::string& path) {
  if (labels.n != 1) throw ConfigError("write_label_pgm expects a single-sample label map");
  std::vector<uint8_t> bytes(static_cast<size_t>(labels.h) * labels.w);
  for (size_t i = 0; i < bytes.size(); ++i) {
    if (labels.v[i] < 0 || labels.v[i] > 255)
      throw ConfigError("label value " + std::to_string(labels.v[i]) + " not byte-representable");
    bytes[i] = static_cast<uint8_t>(labels.v[i]);
  }
  detail::pgm_write(path, bytes.data(), labels.h, labels.w);
}

inline LabelMap read_label_pgm(const std::string& path, int class_count) {
  int h = 0, w = 0;
  const std::vector<uint8_t> bytes = detail::pgm_read(path, h, w);
  LabelMap m = LabelMap::zeros(1, h, w);
  for (size_t i = 0; i < bytes.size(); ++i) {
    if (bytes[i] >= class_count)
      throw DataError("label value " + std::to_string(bytes[i]) + " >= K=" +
                      std::to_string(class_count) + " at payload byte " + std::to_string(i) +
                      " of " + path);
    m.v[i] = bytes[i];
  }
  return m;
}

// --- resizing ----------------------------------------------------------------

namespace detail {

inline int nearest_index(int out_i, int in_len, int out_len) {
  const double src = (out_i + 0.5) * static_cast<double>(in_len) / out_len;
  return std::min(in_len - 1, static_cast<int>(std::floor(src)));
}

}  // namespace detail

inline std::vector<float> resize_image_bilinear(const std::vector<float>& img, int h, int w,
                                                int th, int tw) {
  std::vector<float> out(static_cast<size_t>(th) * tw);
  for (int y = 0; y < th; ++y) {
    const double sy = (y + 0.5) * static_cast<double>(h) / th - 0.5;
    const int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, h - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double ty = std::clamp(sy - std::floor(sy), 0.0, 1.0);
    for (int x = 0; x < tw; ++x) {
      const double sx = (x + 0.5) * static_cast<double>(w) / tw - 0.5;
      const int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, w - 1);
      const int x1 = std::min(x0 + 1, w - 1);
      const double tx = std::clamp(sx - std::floor(sx), 0.0, 1.0);
      const double v = (1 - ty) * ((1 - tx) * img[static_cast<size_t>(y0) * w + x0] +
                                   tx * img[static_cast<size_t>(y0) * w + x1]) +
                       ty * ((1 - tx) * img[static_cast<size_t>(y1) * w + x0] +
                             tx * img[static_cast<size_t>(y1) * w + x1]);
      out[static_cast<size_t>(y) * tw + x] = static_cast<float>(v);
    }
  }
  return out;
}

inline LabelMap resize_labels_nearest(const LabelMap& labels, int th, int tw) {
  LabelMap out = LabelMap::zeros(labels.n, th, tw);
  for (int n = 0; n < labels.n; ++n)
    for (int y = 0; y < th; ++y) {
      const int sy = detail::nearest_index(y, labels.h, th);
      for (int x = 0; x < tw; ++x)
        out.at(n, y, x) = labels.at(n, sy, detail::nearest_index(x, labels.w, tw));
    }
  return out;
}

// Bilinear for the image, nearest-neighbor for the labels.
inline Sample resize_to_model(const Sample& s, int target_h, int target_w) {
  if (target_h % 8 != 0 || target_w % 8 != 0)
    throw ConfigError("resize target must be divisible by 8, got " + std::to_string(target_h) +
                      "x" + std::to_string(target_w));
  if (target_h == s.height && target_w == s.width) return s;
  Sample out;
  out.height = target_h;
  out.width = target_w;
  out.image = resize_image_bilinear(s.image, s.height, s.width, target_h, target_w);
  out.labels = resize_labels_nearest(s.labels, target_h, target_w);
  return out;
}

// --- dataset manifest ---------------------------------------------------------

inline void write_manifest(const std::vector<std::pair<std::string, std::string>>& entries,
                           const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path + " for writing");
  for (const auto& [img, lab] : entries) os << img << "\t" << lab << "\n";
}

inline std::vector<std::pair<std::string, std::string>> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest " + path);
  std::vector<std::pair<std::string, std::string>> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size())
      throw DataError("manifest line " + std::to_string(lineno) +
                      " is not image_path<TAB>label_path");
    entries.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  if (entries.empty()) throw DataError("manifest " + path + " is empty");
  return entries;
}

inline std::vector<Sample> load_dataset(const std::string& manifest_path, int class_count) {
  std::vector<Sample> samples;
  for (const auto& [img_path, lab_path] : read_manifest(manifest_path)) {
    Sample s;
    s.image = read_image_pgm(img_path, s.height, s.width);
    s.labels = read_label_pgm(lab_path, class_count);
    if (s.labels.h != s.height || s.labels.w != s.width)
      throw DataError("image " + img_path + " and labels " + lab_path + " have different sizes");
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace mpg
