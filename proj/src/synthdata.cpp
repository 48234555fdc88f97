#include "tams/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tams/evalstat.hpp"

namespace tams::synthdata {

using ndgrad::Tensor;

namespace {

constexpr double kBgBase = 0.30;
constexpr double kBgNoise = 0.08;
constexpr double kAmplitude = 0.5;  // ellipse signal amplitude
constexpr double kDistractorAmp = 0.12;
constexpr double kMarkNoise = 0.5 * kAmplitude;   // degradation mark
constexpr double kHeavyNoise = 3.0 * kAmplitude;  // blur+noise corruption

struct Ellipse {
  double cx, cy, rx, ry, cos_a, sin_a;
};

Ellipse random_ellipse(Rng& rng, std::size_t h, std::size_t w) {
  double scale = static_cast<double>(h) / 16.0;
  Ellipse e;
  e.cx = rng.uniform(0.35 * static_cast<double>(w), 0.65 * static_cast<double>(w));
  e.cy = rng.uniform(0.35 * static_cast<double>(h), 0.65 * static_cast<double>(h));
  e.rx = rng.uniform(2.5, 5.0) * scale;
  e.ry = rng.uniform(2.5, 5.0) * scale;
  double a = rng.uniform(0.0, M_PI);
  e.cos_a = std::cos(a);
  e.sin_a = std::sin(a);
  return e;
}

double ellipse_r2(const Ellipse& e, std::size_t i, std::size_t j) {
  double dx = static_cast<double>(j) + 0.5 - e.cx;
  double dy = static_cast<double>(i) + 0.5 - e.cy;
  double u = dx * e.cos_a + dy * e.sin_a;
  double v = -dx * e.sin_a + dy * e.cos_a;
  return (u / e.rx) * (u / e.rx) + (v / e.ry) * (v / e.ry);
}

void clip01(std::vector<double>& img) {
  for (double& v : img) v = std::clamp(v, 0.0, 1.0);
}

std::vector<double> render_background(Rng& rng, std::size_t h, std::size_t w) {
  std::vector<double> img(h * w);
  for (double& v : img) v = kBgBase + kBgNoise * rng.normal();
  // A couple of faint distractor dots in either class.
  int dots = 2;
  for (int d = 0; d < dots; ++d) {
    double cx = rng.uniform(1.0, static_cast<double>(w) - 1.0);
    double cy = rng.uniform(1.0, static_cast<double>(h) - 1.0);
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        double dx = static_cast<double>(j) + 0.5 - cx;
        double dy = static_cast<double>(i) + 0.5 - cy;
        img[i * w + j] += kDistractorAmp * std::exp(-(dx * dx + dy * dy) / 1.5);
      }
    }
  }
  return img;
}

void add_ellipse(std::vector<double>& img, const Ellipse& e, std::size_t h, std::size_t w,
                 double amplitude) {
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      double r2 = ellipse_r2(e, i, j);
      img[i * w + j] += amplitude / (1.0 + std::exp((r2 - 1.0) / 0.08));
    }
  }
}

std::vector<double> ellipse_mask(const Ellipse& e, std::size_t h, std::size_t w) {
  std::vector<double> m(h * w, 0.0);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      if (ellipse_r2(e, i, j) <= 1.0) m[i * w + j] = 1.0;
    }
  }
  return m;
}

std::vector<double> box_blur3(const std::vector<double>& img, std::size_t h, std::size_t w) {
  std::vector<double> out(h * w);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      double acc = 0.0;
      int count = 0;
      for (int di = -1; di <= 1; ++di) {
        for (int dj = -1; dj <= 1; ++dj) {
          std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + di;
          std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) + dj;
          if (si < 0 || sj < 0 || si >= static_cast<std::ptrdiff_t>(h) ||
              sj >= static_cast<std::ptrdiff_t>(w)) {
            continue;
          }
          acc += img[static_cast<std::size_t>(si) * w + static_cast<std::size_t>(sj)];
          ++count;
        }
      }
      out[i * w + j] = acc / count;
    }
  }
  return out;
}

void add_noise(std::vector<double>& img, double sigma, Rng& rng) {
  for (double& v : img) v += sigma * rng.normal();
}

// Blank the vertical or horizontal half of the image; when a point of
// interest is given, the blanked half is the one containing it.
void occlude_half(std::vector<double>& img, std::size_t h, std::size_t w, Rng& rng,
                  std::optional<std::pair<double, double>> focus) {
  bool vertical = rng.bernoulli(0.5);
  bool second_half;
  if (focus) {
    second_half = vertical ? (focus->first >= static_cast<double>(w) / 2.0)
                           : (focus->second >= static_cast<double>(h) / 2.0);
  } else {
    second_half = rng.bernoulli(0.5);
  }
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      bool in_half = vertical ? (second_half ? j >= w / 2 : j < w / 2)
                              : (second_half ? i >= h / 2 : i < h / 2);
      if (in_half) img[i * w + j] = 0.0;
    }
  }
}

// Exact corruption counts: round(rho*n) overall, spread per group by largest
// remainder so any group-level split inherits close to the global fraction.
std::vector<bool> corruption_flags(std::size_t n, std::size_t groups, double rho, Rng& rng) {
  std::vector<std::size_t> group_of(n);
  std::vector<std::size_t> group_size(groups, 0);
  for (std::size_t i = 0; i < n; ++i) {
    group_of[i] = i * groups / n;
    ++group_size[group_of[i]];
  }
  std::size_t total = static_cast<std::size_t>(std::llround(rho * static_cast<double>(n)));
  std::vector<std::size_t> quota(groups);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    double q = rho * static_cast<double>(group_size[g]);
    quota[g] = static_cast<std::size_t>(std::floor(q));
    quota[g] = std::min(quota[g], group_size[g]);
    assigned += quota[g];
    remainders.emplace_back(q - std::floor(q), g);
  }
  std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::size_t k = 0;
  while (assigned < total && k < remainders.size()) {
    std::size_t g = remainders[k].second;
    if (quota[g] < group_size[g]) {
      ++quota[g];
      ++assigned;
    }
    ++k;
    if (k == remainders.size() && assigned < total) k = 0;  // spill over if saturated
  }
  std::vector<bool> flags(n, false);
  std::size_t start = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    std::vector<std::size_t> local(group_size[g]);
    std::iota(local.begin(), local.end(), start);
    rng.shuffle(local);
    for (std::size_t t = 0; t < quota[g]; ++t) flags[local[t]] = true;
    start += group_size[g];
  }
  return flags;
}

std::vector<bool> mild_blur_flags(std::size_t n, const std::vector<bool>& corrupted, Rng& rng) {
  std::vector<std::size_t> clean_ids;
  for (std::size_t i = 0; i < n; ++i) {
    if (!corrupted[i]) clean_ids.push_back(i);
  }
  std::size_t count =
      static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(clean_ids.size())));
  rng.shuffle(clean_ids);
  std::vector<bool> flags(n, false);
  for (std::size_t t = 0; t < count && t < clean_ids.size(); ++t) flags[clean_ids[t]] = true;
  return flags;
}

void check_gen_args(std::size_t n, std::size_t groups, double rho, std::size_t image) {
  if (n == 0) throw ValueError("generator: n must be positive");
  if (rho < 0.0 || rho >= 1.0) throw ValueError("generator: rho must lie in [0,1)");
  if (groups < 2) throw ValueError("generator: need at least two groups");
  if (groups > n) throw ValueError("generator: more groups than samples");
  if (image < 8 || image % 4 != 0) {
    throw ValueError("generator: image size must be a multiple of 4, at least 8");
  }
}

}  // namespace

Dataset gen_classification(std::size_t n, std::size_t groups, double rho, CorruptionKind kind,
                           std::uint64_t seed, std::size_t image) {
  check_gen_args(n, groups, rho, image);
  if (kind == CorruptionKind::mask_dropout) {
    throw ValueError("gen_classification: mask-dropout applies to segmentation");
  }
  std::size_t h = image, w = image;
  Rng master(seed);
  Rng corrupt_rng = master.fork("corruption");
  std::vector<bool> corrupted = corruption_flags(n, groups, rho, corrupt_rng);
  Rng mild_rng = master.fork("mildblur");
  std::vector<bool> mild = mild_blur_flags(n, corrupted, mild_rng);

  Dataset ds;
  ds.manifest = {TaskKind::classification, static_cast<std::uint32_t>(n),     rho, kind, seed,
                 static_cast<std::uint16_t>(h), static_cast<std::uint16_t>(w)};
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = master.fork("sample" + std::to_string(i));
    DatasetSample s;
    s.id = static_cast<std::uint32_t>(i);
    s.group_id = static_cast<std::uint32_t>(i * groups / n);
    s.corrupted = corrupted[i];
    int label = rng.bernoulli(0.5) ? 1 : 0;
    Ellipse e = random_ellipse(rng, h, w);  // drawn for both classes, keeps streams aligned
    std::vector<double> img = render_background(rng, h, w);

    if (!s.corrupted) {
      if (label == 1) add_ellipse(img, e, h, w, kAmplitude);
      clip01(img);
      if (mild[i]) img = box_blur3(img, h, w);
      s.class_label = label;
    } else {
      switch (kind) {
        case CorruptionKind::label_noise: {
          // Class evidence removed entirely, label flipped; the provided
          // label carries no recoverable image information.
          img = box_blur3(img, h, w);
          add_noise(img, kMarkNoise, rng);
          clip01(img);
          s.class_label = 1 - label;
          break;
        }
        case CorruptionKind::occlusion: {
          if (label == 1) add_ellipse(img, e, h, w, kAmplitude);
          clip01(img);
          occlude_half(img, h, w, rng,
                       label == 1 ? std::optional<std::pair<double, double>>({e.cx, e.cy})
                                  : std::nullopt);
          s.class_label = label;
          break;
        }
        case CorruptionKind::blur_noise: {
          if (label == 1) add_ellipse(img, e, h, w, kAmplitude);
          clip01(img);
          img = box_blur3(img, h, w);
          add_noise(img, kHeavyNoise, rng);
          clip01(img);
          s.class_label = label;
          break;
        }
        case CorruptionKind::mask_dropout:
          break;  // rejected above
      }
    }
    s.features = Tensor({1, h, w}, std::move(img));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Dataset gen_segmentation(std::size_t n, std::size_t groups, double rho, CorruptionKind kind,
                         std::uint64_t seed, std::size_t image) {
  check_gen_args(n, groups, rho, image);
  if (kind == CorruptionKind::label_noise) {
    throw ValueError("gen_segmentation: label-noise applies to classification");
  }
  std::size_t h = image, w = image;
  Rng master(seed);
  Rng corrupt_rng = master.fork("corruption");
  std::vector<bool> corrupted = corruption_flags(n, groups, rho, corrupt_rng);
  Rng mild_rng = master.fork("mildblur");
  std::vector<bool> mild = mild_blur_flags(n, corrupted, mild_rng);

  Dataset ds;
  ds.manifest = {TaskKind::segmentation, static_cast<std::uint32_t>(n),      rho, kind, seed,
                 static_cast<std::uint16_t>(h), static_cast<std::uint16_t>(w)};
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = master.fork("sample" + std::to_string(i));
    DatasetSample s;
    s.id = static_cast<std::uint32_t>(i);
    s.group_id = static_cast<std::uint32_t>(i * groups / n);
    s.corrupted = corrupted[i];

    Ellipse e = random_ellipse(rng, h, w);
    std::vector<double> img = render_background(rng, h, w);
    add_ellipse(img, e, h, w, kAmplitude);
    clip01(img);
    std::vector<double> true_mask = ellipse_mask(e, h, w);

    std::vector<double> mask = true_mask;
    if (!s.corrupted) {
      if (mild[i]) img = box_blur3(img, h, w);
    } else {
      switch (kind) {
        case CorruptionKind::mask_dropout: {
          img = box_blur3(img, h, w);
          add_noise(img, kMarkNoise, rng);
          clip01(img);
          bool use_empty = rng.bernoulli(0.5);
          if (!use_empty) {
            // Shift far enough that the overlap stays below Dice 0.5; fall
            // back to the empty mask if the draw lands too close.
            std::ptrdiff_t di = (rng.bernoulli(0.5) ? 1 : -1) *
                                static_cast<std::ptrdiff_t>(rng.index(h / 4) + h / 3);
            std::ptrdiff_t dj = (rng.bernoulli(0.5) ? 1 : -1) *
                                static_cast<std::ptrdiff_t>(rng.index(w / 4) + w / 3);
            std::vector<double> shifted(h * w, 0.0);
            for (std::size_t ii = 0; ii < h; ++ii) {
              for (std::size_t jj = 0; jj < w; ++jj) {
                std::ptrdiff_t si = static_cast<std::ptrdiff_t>(ii) - di;
                std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(jj) - dj;
                if (si >= 0 && sj >= 0 && si < static_cast<std::ptrdiff_t>(h) &&
                    sj < static_cast<std::ptrdiff_t>(w)) {
                  shifted[ii * w + jj] = true_mask[static_cast<std::size_t>(si) * w +
                                                   static_cast<std::size_t>(sj)];
                }
              }
            }
            double d = evalstat::dice(Tensor({h, w}, shifted), Tensor({h, w}, true_mask));
            if (d < 0.5) {
              mask = std::move(shifted);
            } else {
              std::fill(mask.begin(), mask.end(), 0.0);
            }
          } else {
            std::fill(mask.begin(), mask.end(), 0.0);
          }
          break;
        }
        case CorruptionKind::occlusion:
          occlude_half(img, h, w, rng, std::optional<std::pair<double, double>>({e.cx, e.cy}));
          break;
        case CorruptionKind::blur_noise:
          img = box_blur3(img, h, w);
          add_noise(img, kHeavyNoise, rng);
          clip01(img);
          break;
        case CorruptionKind::label_noise:
          break;  // rejected above
      }
    }
    s.features = Tensor({1, h, w}, std::move(img));
    s.mask_label = Tensor({h, w}, std::move(mask));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

SplitResult split(const std::vector<DatasetSample>& samples, const SplitFractions& fractions,
                  std::uint64_t seed) {
  double sum = fractions.train + fractions.val + fractions.holdout;
  if (std::abs(sum - 1.0) > 1e-9) throw ValueError("split: fractions must sum to 1");
  if (fractions.train < 0 || fractions.val < 0 || fractions.holdout < 0) {
    throw ValueError("split: fractions must be non-negative");
  }
  std::vector<std::uint32_t> group_ids;
  for (const auto& s : samples) {
    if (std::find(group_ids.begin(), group_ids.end(), s.group_id) == group_ids.end()) {
      group_ids.push_back(s.group_id);
    }
  }
  std::sort(group_ids.begin(), group_ids.end());
  if (group_ids.size() <= 3) throw ValueError("split: need more than 3 groups");

  Rng rng(seed);
  rng.shuffle(group_ids);
  std::size_t g = group_ids.size();
  std::size_t cut1 = static_cast<std::size_t>(
      std::llround(fractions.train * static_cast<double>(g)));
  std::size_t cut2 = static_cast<std::size_t>(
      std::llround((fractions.train + fractions.val) * static_cast<double>(g)));
  cut1 = std::min(cut1, g);
  cut2 = std::clamp(cut2, cut1, g);

  SplitResult out;
  std::vector<std::uint32_t> train_groups(group_ids.begin(), group_ids.begin() + cut1);
  std::vector<std::uint32_t> val_groups(group_ids.begin() + cut1, group_ids.begin() + cut2);
  auto in = [](const std::vector<std::uint32_t>& v, std::uint32_t x) {
    return std::find(v.begin(), v.end(), x) != v.end();
  };
  for (const auto& s : samples) {
    if (in(train_groups, s.group_id)) {
      out.train.push_back(s);
    } else if (in(val_groups, s.group_id)) {
      out.val.push_back(s);
    } else {
      out.holdout.push_back(s);
    }
  }
  return out;
}

std::vector<DatasetSample> clean_validation_filter(const std::vector<DatasetSample>& samples) {
  std::vector<DatasetSample> out;
  for (const auto& s : samples) {
    if (!s.corrupted) out.push_back(s);
  }
  return out;
}

namespace {
constexpr char kMagic[4] = {'T', 'A', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void dataset_save(const Dataset& dataset, const std::filesystem::path& path) {
  const DatasetManifest& m = dataset.manifest;
  if (dataset.samples.size() != m.n) {
    throw ValueError("dataset_save: manifest count does not match samples");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open dataset for writing: " + path.string());
  io::write_bytes(out, kMagic, 4);
  io::write_u32(out, kVersion);
  io::write_u8(out, static_cast<std::uint8_t>(m.task));
  io::write_u32(out, m.n);
  io::write_f64(out, m.rho);
  io::write_u8(out, static_cast<std::uint8_t>(m.kind));
  io::write_u64(out, m.seed);
  io::write_u16(out, m.height);
  io::write_u16(out, m.width);
  std::size_t hw = static_cast<std::size_t>(m.height) * m.width;
  std::size_t mask_bytes = (hw + 7) / 8;
  std::ostringstream csv;
  csv << "id,group_id,corrupted,label_summary\n";
  for (const auto& s : dataset.samples) {
    io::write_u32(out, s.id);
    io::write_u32(out, s.group_id);
    io::write_u8(out, s.corrupted ? 1 : 0);
    if (m.task == TaskKind::classification) {
      if (s.class_label < 0) throw ValueError("dataset_save: missing class label");
      io::write_u16(out, static_cast<std::uint16_t>(s.class_label));
      csv << s.id << ',' << s.group_id << ',' << (s.corrupted ? 1 : 0) << ",class="
          << s.class_label << '\n';
    } else {
      if (!s.mask_label.defined()) throw ValueError("dataset_save: missing mask label");
      const auto& mv = s.mask_label.data();
      if (mv.size() != hw) throw ShapeError("dataset_save: mask size mismatch");
      std::size_t px = 0;
      std::vector<std::uint8_t> bits(mask_bytes, 0);
      for (std::size_t i = 0; i < hw; ++i) {
        if (mv[i] == 1.0) {
          bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
          ++px;
        } else if (mv[i] != 0.0) {
          throw ValueError("dataset_save: non-binary mask");
        }
      }
      io::write_bytes(out, bits.data(), bits.size());
      csv << s.id << ',' << s.group_id << ',' << (s.corrupted ? 1 : 0) << ",mask_px=" << px
          << '\n';
    }
    const auto& fv = s.features.data();
    if (fv.size() != hw) throw ShapeError("dataset_save: feature size mismatch");
    for (double v : fv) io::write_f64(out, v);
  }
  if (!out) throw IoError("dataset write failed: " + path.string());
  out.close();
  io::write_text_file(path.string() + ".csv", csv.str());
}

Dataset dataset_load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset: " + path.string());
  char magic[4];
  io::read_bytes(in, magic, 4, "dataset magic");
  if (!std::equal(magic, magic + 4, kMagic)) {
    throw IoError("bad magic in dataset: " + path.string());
  }
  std::uint32_t version = io::read_u32(in, "dataset version");
  if (version != kVersion) {
    throw IoError("unsupported dataset version " + std::to_string(version));
  }
  Dataset ds;
  DatasetManifest& m = ds.manifest;
  std::uint8_t task = io::read_u8(in, "task kind");
  if (task > 1) throw IoError("invalid task kind in dataset");
  m.task = static_cast<TaskKind>(task);
  m.n = io::read_u32(in, "sample count");
  m.rho = io::read_f64(in, "corruption fraction");
  std::uint8_t kind = io::read_u8(in, "corruption kind");
  if (kind > 3) throw IoError("invalid corruption kind in dataset");
  m.kind = static_cast<CorruptionKind>(kind);
  m.seed = io::read_u64(in, "seed");
  m.height = io::read_u16(in, "height");
  m.width = io::read_u16(in, "width");
  std::size_t h = m.height, w = m.width, hw = h * w;
  std::size_t mask_bytes = (hw + 7) / 8;

  ds.samples.reserve(m.n);
  std::size_t corrupted_count = 0;
  for (std::uint32_t i = 0; i < m.n; ++i) {
    DatasetSample s;
    s.id = io::read_u32(in, "sample id");
    s.group_id = io::read_u32(in, "group id");
    s.corrupted = io::read_u8(in, "corrupted flag") != 0;
    corrupted_count += s.corrupted;
    if (m.task == TaskKind::classification) {
      s.class_label = io::read_u16(in, "class label");
    } else {
      std::vector<std::uint8_t> bits(mask_bytes);
      io::read_bytes(in, bits.data(), bits.size(), "mask bitset");
      std::vector<double> mv(hw, 0.0);
      for (std::size_t k = 0; k < hw; ++k) {
        if (bits[k / 8] & (1u << (k % 8))) mv[k] = 1.0;
      }
      s.mask_label = Tensor({h, w}, std::move(mv));
    }
    std::vector<double> fv(hw);
    for (auto& v : fv) v = io::read_f64(in, "feature data");
    s.features = Tensor({1, h, w}, std::move(fv));
    ds.samples.push_back(std::move(s));
  }
  if (in.peek() != std::ifstream::traits_type::eof()) {
    throw IoError("trailing bytes after dataset payload: " + path.string());
  }
  std::size_t expected =
      static_cast<std::size_t>(std::llround(m.rho * static_cast<double>(m.n)));
  if (corrupted_count != expected) {
    throw IoError("dataset integrity: corrupted count " + std::to_string(corrupted_count) +
                  " does not match manifest fraction (expected " + std::to_string(expected) +
                  ")");
  }
  return ds;
}

}  // namespace tams::synthdata
