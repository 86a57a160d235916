#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

namespace pad {

struct ExperimentConfig;

/// Appearance of one person; a pure function of (seed, id).
struct Identity {
  int id = 0;
  double torso_hue = 0, torso_sat = 0, torso_val = 0;
  double leg_hue = 0, leg_sat = 0, leg_val = 0;
  double skin_tone = 0;
  double body_scale = 1;
  int texture_id = 0;  // 0 plain, 1 horizontal stripes, 2 vertical band, 3 dots
};

Identity make_identity(uint64_t seed, int id);

struct DomainShift {
  double hue_rotation = 0;  // in turns, applied to every pixel
  int background_texture = 0;
  double noise_sigma = 0;
  double occlusion_prob = 0;
};

struct DomainSpec {
  int domain_id = 0;
  DomainShift shift;
  int n_train_ids = 20;
  int n_test_ids = 10;
  int n_cameras = 3;
  int views_per_camera = 4;
  int first_identity = 0;  // train ids first, then test ids
  int image_h = 32, image_w = 16;
};

/// H x W x 3 pixels in [0, 1], stored row-major (HWC).
struct RenderedImage {
  std::vector<double> pixels;
  int height = 0, width = 0;
  int identity = 0;
  int camera = 0;
  int view = 0;
  int domain = 0;

  double at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
};

struct EvalSplit {
  int domain_id = 0;
  std::vector<RenderedImage> query;
  std::vector<RenderedImage> gallery;
};

struct DomainDataset {
  DomainSpec spec;
  std::vector<RenderedImage> train;
  std::vector<int> train_labels;      // local class index per train image
  std::vector<int> train_identities;  // global id per local class
  EvalSplit test;
};

RenderedImage render_image(uint64_t seed, const Identity& person, int camera, int view, const DomainSpec& spec);

/// Train set (every camera x view of each train id) plus a query/gallery
/// split of the test ids: view 0 of each camera is a query, the rest gallery.
DomainDataset generate_domain(uint64_t seed, const DomainSpec& spec);

DomainSpec seen_domain_spec(const ExperimentConfig& cfg, int t);
DomainSpec unseen_domain_spec(const ExperimentConfig& cfg, int u);

std::vector<EvalSplit> make_unseen_suite(uint64_t seed, const ExperimentConfig& cfg, int n_domains);

struct PKBatch {
  std::vector<int> indices;  // into the item list
  std::vector<int> labels;   // local class of each item
};

/// P distinct classes uniformly, then K distinct items of each.
PKBatch sample_pk_batch(const std::vector<int>& item_labels, int num_classes, int P, int K,
                        std::mt19937_64& rng);
PKBatch sample_pk_batch(const DomainDataset& train, int P, int K, std::mt19937_64& rng);

/// Writes {domain}_{id}_{cam}_{view}.png files and manifest.csv.
void export_dataset(const std::vector<DomainDataset>& domains, const std::vector<EvalSplit>& unseen,
                    const std::filesystem::path& dir);

/// Hue of an RGB triple in turns [0, 1); saturation returned via `sat`.
double rgb_hue(double r, double g, double b, double* sat = nullptr);

}  // namespace pad
