#include "pad/synthdata.hpp"

#include "pad/config.hpp"
#include "pad/io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace pad {

namespace {

uint64_t splitmix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t mix(std::initializer_list<uint64_t> parts) {
  uint64_t h = 0x2545f4914f6cdd1dULL;
  for (uint64_t p : parts) h = splitmix(h ^ splitmix(p));
  return h;
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double delta = mx - mn;
  double h = 0;
  if (delta > 0) {
    if (mx == r)
      h = std::fmod((g - b) / delta, 6.0);
    else if (mx == g)
      h = (b - r) / delta + 2.0;
    else
      h = (r - g) / delta + 4.0;
    h /= 6.0;
    if (h < 0) h += 1.0;
  }
  const double s = mx > 0 ? delta / mx : 0.0;
  return {h, s, mx};
}

struct Canvas {
  int h, w;
  std::vector<double> px;
  Canvas(int hh, int ww) : h(hh), w(ww), px(static_cast<size_t>(hh) * ww * 3, 0.0) {}
  void set(int y, int x, const std::array<double, 3>& c) {
    if (y < 0 || y >= h || x < 0 || x >= w) return;
    for (int k = 0; k < 3; ++k) px[(static_cast<size_t>(y) * w + x) * 3 + k] = c[k];
  }
};

void paint_background(Canvas& cv, int texture, uint64_t seed) {
  std::mt19937_64 rng(mix({seed, 0xb9ULL, static_cast<uint64_t>(texture)}));
  const double base_h = uniform(rng, 0, 1), base_s = uniform(rng, 0.05, 0.35), base_v = uniform(rng, 0.35, 0.75);
  const int pattern = texture % 4;
  const int period = 2 + static_cast<int>(uniform(rng, 0, 4));
  const double contrast = uniform(rng, 0.08, 0.25);
  for (int y = 0; y < cv.h; ++y)
    for (int x = 0; x < cv.w; ++x) {
      double mod = 0;
      switch (pattern) {
        case 0: mod = ((y / period) % 2) ? contrast : -contrast; break;
        case 1: mod = ((x / period) % 2) ? contrast : -contrast; break;
        case 2: mod = (((x / period) + (y / period)) % 2) ? contrast : -contrast; break;
        default: mod = contrast * (2.0 * y / std::max(1, cv.h - 1) - 1.0); break;
      }
      cv.set(y, x, hsv_to_rgb(base_h, base_s, std::clamp(base_v + mod, 0.0, 1.0)));
    }
}

}  // namespace

double rgb_hue(double r, double g, double b, double* sat) {
  auto hsv = rgb_to_hsv(r, g, b);
  if (sat) *sat = hsv[1];
  return hsv[0];
}

Identity make_identity(uint64_t seed, int id) {
  std::mt19937_64 rng(mix({seed, 0x1dULL, static_cast<uint64_t>(id)}));
  Identity p;
  p.id = id;
  p.torso_hue = uniform(rng, 0, 1);
  p.torso_sat = uniform(rng, 0.45, 1.0);
  p.torso_val = uniform(rng, 0.35, 0.95);
  p.leg_hue = uniform(rng, 0, 1);
  p.leg_sat = uniform(rng, 0.15, 0.9);
  p.leg_val = uniform(rng, 0.15, 0.8);
  p.skin_tone = uniform(rng, 0.35, 0.9);
  p.body_scale = uniform(rng, 0.8, 1.15);
  p.texture_id = static_cast<int>(uniform(rng, 0, 4));
  return p;
}

RenderedImage render_image(uint64_t seed, const Identity& person, int camera, int view, const DomainSpec& spec) {
  const int H = spec.image_h, W = spec.image_w;
  Canvas cv(H, W);
  paint_background(cv, spec.shift.background_texture, seed);

  // Camera-level geometry and illumination, then per-view jitter.
  std::mt19937_64 cam_rng(mix({seed, 0xcaULL, static_cast<uint64_t>(spec.domain_id), static_cast<uint64_t>(camera)}));
  const double gain = uniform(cam_rng, 0.75, 1.2);
  const int cam_dx = static_cast<int>(std::floor(uniform(cam_rng, -2, 3)));
  const int cam_dy = static_cast<int>(std::floor(uniform(cam_rng, -1, 2)));
  const double cam_scale = uniform(cam_rng, 0.92, 1.08);

  std::mt19937_64 rng(mix({seed, 0x7eULL, static_cast<uint64_t>(spec.domain_id), static_cast<uint64_t>(person.id),
                           static_cast<uint64_t>(camera), static_cast<uint64_t>(view)}));
  const int dx = cam_dx + static_cast<int>(std::floor(uniform(rng, -1, 2)));
  const int dy = cam_dy + static_cast<int>(std::floor(uniform(rng, -1, 2)));
  const double shade = uniform(rng, 0.92, 1.08);
  const double scale = person.body_scale * cam_scale;

  const double cx = W / 2.0 + dx;
  const auto skin = hsv_to_rgb(0.07, 0.45, person.skin_tone * shade);
  const auto torso = hsv_to_rgb(person.torso_hue, person.torso_sat, std::min(1.0, person.torso_val * shade));
  const auto torso_dark = hsv_to_rgb(person.torso_hue, person.torso_sat, person.torso_val * shade * 0.55);
  const auto legs = hsv_to_rgb(person.leg_hue, person.leg_sat, std::min(1.0, person.leg_val * shade));

  auto row = [&](double frac) { return static_cast<int>(std::lround(dy + frac * H)); };
  const int head_top = row(0.06), head_bot = row(0.22);
  const int torso_top = head_bot, torso_bot = row(0.56);
  const int leg_bot = row(0.96);
  const double head_half = 1.8 * scale, torso_half = 3.6 * scale, leg_w = 1.6 * scale;
  const double leg_gap = uniform(rng, 0.3, 1.2);

  for (int y = head_top; y < head_bot; ++y)
    for (int x = 0; x < W; ++x)
      if (std::abs(x + 0.5 - cx) <= head_half) cv.set(y, x, skin);
  for (int y = torso_top; y < torso_bot; ++y)
    for (int x = 0; x < W; ++x) {
      const double off = x + 0.5 - cx;
      if (std::abs(off) > torso_half) continue;
      bool dark = false;
      switch (person.texture_id) {
        case 1: dark = ((y - torso_top) / 2) % 2 == 1; break;
        case 2: dark = std::abs(off) < 0.8 * scale; break;
        case 3: dark = ((y - torso_top) % 3 == 1) && (x % 3 == 1); break;
        default: break;
      }
      cv.set(y, x, dark ? torso_dark : torso);
    }
  for (int y = torso_bot; y < leg_bot; ++y)
    for (int x = 0; x < W; ++x) {
      const double off = std::abs(x + 0.5 - cx);
      if (off >= leg_gap / 2 && off <= leg_gap / 2 + leg_w) cv.set(y, x, legs);
    }

  for (double& v : cv.px) v *= gain;

  if (uniform(rng, 0, 1) < spec.shift.occlusion_prob) {
    const int bar_h = 4 + static_cast<int>(uniform(rng, 0, 5));
    const int top = static_cast<int>(uniform(rng, 0, H - bar_h));
    for (int y = top; y < top + bar_h; ++y)
      for (int x = 0; x < W; ++x) cv.set(y, x, {0.5, 0.5, 0.5});
  }

  if (spec.shift.noise_sigma > 0) {
    std::normal_distribution<double> noise(0.0, spec.shift.noise_sigma);
    for (double& v : cv.px) v += noise(rng);
  }
  for (double& v : cv.px) v = std::clamp(v, 0.0, 1.0);

  // Hue rotation last: it preserves saturation and value, so the shift is exact.
  if (spec.shift.hue_rotation != 0.0) {
    for (size_t i = 0; i < cv.px.size(); i += 3) {
      auto hsv = rgb_to_hsv(cv.px[i], cv.px[i + 1], cv.px[i + 2]);
      if (hsv[1] == 0.0) continue;
      auto rgb = hsv_to_rgb(hsv[0] + spec.shift.hue_rotation, hsv[1], hsv[2]);
      std::copy(rgb.begin(), rgb.end(), cv.px.begin() + static_cast<std::ptrdiff_t>(i));
    }
  }

  RenderedImage img;
  img.pixels = std::move(cv.px);
  img.height = H;
  img.width = W;
  img.identity = person.id;
  img.camera = camera;
  img.view = view;
  img.domain = spec.domain_id;
  return img;
}

DomainDataset generate_domain(uint64_t seed, const DomainSpec& spec) {
  if (spec.n_train_ids < 1 || spec.n_test_ids < 1 || spec.n_cameras < 2 || spec.views_per_camera < 2)
    throw std::invalid_argument("generate_domain: need >= 1 train/test id, >= 2 cameras and >= 2 views");
  DomainDataset ds;
  ds.spec = spec;
  for (int i = 0; i < spec.n_train_ids; ++i) {
    const Identity person = make_identity(seed, spec.first_identity + i);
    ds.train_identities.push_back(person.id);
    for (int c = 0; c < spec.n_cameras; ++c)
      for (int v = 0; v < spec.views_per_camera; ++v) {
        ds.train.push_back(render_image(seed, person, c, v, spec));
        ds.train_labels.push_back(i);
      }
  }
  ds.test.domain_id = spec.domain_id;
  for (int i = 0; i < spec.n_test_ids; ++i) {
    const Identity person = make_identity(seed, spec.first_identity + spec.n_train_ids + i);
    for (int c = 0; c < spec.n_cameras; ++c)
      for (int v = 0; v < spec.views_per_camera; ++v) {
        auto img = render_image(seed, person, c, v, spec);
        (v == 0 ? ds.test.query : ds.test.gallery).push_back(std::move(img));
      }
  }
  return ds;
}

namespace {

DomainSpec base_spec(const ExperimentConfig& cfg) {
  DomainSpec s;
  s.n_train_ids = cfg.n_train_ids;
  s.n_test_ids = cfg.n_test_ids;
  s.n_cameras = cfg.n_cameras;
  s.views_per_camera = cfg.views_per_camera;
  s.image_h = cfg.image_h;
  s.image_w = cfg.image_w;
  return s;
}

constexpr int kIdsPerDomain = 10000;
constexpr int kUnseenIdBase = 1 << 24;
constexpr int kUnseenDomainBase = 1000;
constexpr int kUnseenTextureBase = 100;

}  // namespace

DomainSpec seen_domain_spec(const ExperimentConfig& cfg, int t) {
  DomainSpec s = base_spec(cfg);
  s.domain_id = t;
  s.shift.hue_rotation = std::fmod(0.21 * t, 1.0);
  s.shift.background_texture = t;
  s.shift.noise_sigma = 0.02 + 0.01 * (t % 3);
  s.shift.occlusion_prob = 0.05 * (t % 4);
  s.first_identity = t * kIdsPerDomain;
  return s;
}

DomainSpec unseen_domain_spec(const ExperimentConfig& cfg, int u) {
  DomainSpec s = base_spec(cfg);
  s.domain_id = kUnseenDomainBase + u;
  s.shift.hue_rotation = std::fmod(0.61 + 0.27 * u, 1.0);
  s.shift.background_texture = kUnseenTextureBase + u;
  s.shift.noise_sigma = 0.035;
  s.shift.occlusion_prob = 0.1;
  s.n_train_ids = 1;  // train part unused; only the split is kept
  s.first_identity = kUnseenIdBase + u * kIdsPerDomain;
  return s;
}

std::vector<EvalSplit> make_unseen_suite(uint64_t seed, const ExperimentConfig& cfg, int n_domains) {
  if (n_domains < 1) throw std::invalid_argument("make_unseen_suite: need at least one domain");
  std::vector<EvalSplit> out;
  for (int u = 0; u < n_domains; ++u) out.push_back(generate_domain(seed, unseen_domain_spec(cfg, u)).test);
  return out;
}

PKBatch sample_pk_batch(const std::vector<int>& item_labels, int num_classes, int P, int K, std::mt19937_64& rng) {
  if (P < 1 || K < 1) throw std::invalid_argument("sample_pk_batch: P and K must be >= 1");
  std::vector<std::vector<int>> by_class(static_cast<size_t>(num_classes));
  for (size_t i = 0; i < item_labels.size(); ++i) by_class.at(static_cast<size_t>(item_labels[i])).push_back(static_cast<int>(i));
  std::vector<int> eligible;
  for (int c = 0; c < num_classes; ++c)
    if (static_cast<int>(by_class[c].size()) >= K) eligible.push_back(c);
  if (static_cast<int>(eligible.size()) < P)
    throw std::invalid_argument("sample_pk_batch: fewer than P identities with K instances");

  // Partial Fisher-Yates for classes, then for instances within each class.
  PKBatch batch;
  for (int p = 0; p < P; ++p) {
    std::uniform_int_distribution<size_t> pick(static_cast<size_t>(p), eligible.size() - 1);
    std::swap(eligible[static_cast<size_t>(p)], eligible[pick(rng)]);
    auto items = by_class[static_cast<size_t>(eligible[static_cast<size_t>(p)])];
    for (int k = 0; k < K; ++k) {
      std::uniform_int_distribution<size_t> pick_item(static_cast<size_t>(k), items.size() - 1);
      std::swap(items[static_cast<size_t>(k)], items[pick_item(rng)]);
      batch.indices.push_back(items[static_cast<size_t>(k)]);
      batch.labels.push_back(eligible[static_cast<size_t>(p)]);
    }
  }
  return batch;
}

PKBatch sample_pk_batch(const DomainDataset& train, int P, int K, std::mt19937_64& rng) {
  return sample_pk_batch(train.train_labels, static_cast<int>(train.train_identities.size()), P, K, rng);
}

void export_dataset(const std::vector<DomainDataset>& domains, const std::vector<EvalSplit>& unseen,
                    const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw std::runtime_error("cannot write manifest in " + dir.string());
  manifest << "path,identity,camera,domain,split\n";
  auto emit = [&](const RenderedImage& img, const char* split) {
    const std::string name = std::to_string(img.domain) + "_" + std::to_string(img.identity) + "_" +
                             std::to_string(img.camera) + "_" + std::to_string(img.view) + ".png";
    write_png(dir / name, img);
    manifest << name << "," << img.identity << "," << img.camera << "," << img.domain << "," << split << "\n";
  };
  for (const auto& d : domains) {
    for (const auto& img : d.train) emit(img, "train");
    for (const auto& img : d.test.query) emit(img, "query");
    for (const auto& img : d.test.gallery) emit(img, "gallery");
  }
  for (const auto& s : unseen) {
    for (const auto& img : s.query) emit(img, "query");
    for (const auto& img : s.gallery) emit(img, "gallery");
  }
}

}  // namespace pad
