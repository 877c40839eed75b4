#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nfkit/common.hpp"

// Time-resolved slides, preprocessing, microenvironment extraction, spatial
// K-Means partitioning, grid-based evaluation sets, and a synthetic
// generator used by the test and bench harnesses.

namespace nfkit::data {

struct Cell {
    std::array<double, 2> coords{};
    std::vector<double> features;
    int type_label = -1;  // -1 = unlabeled
    int time_index = 0;
};

struct Slide {
    int time_index = 0;
    std::vector<Cell> cells;
};

// Per-dataset sidecar: dimensions plus which preprocessing stages ran.
struct DatasetMeta {
    int feature_dim = 0;
    int num_timepoints = 0;
    int num_types = 0;
    std::uint64_t seed = 0;
    bool normalized = false;
    bool log1p = false;
    bool pca = false;
    bool std_features = false;
    bool std_coords = false;
    std::string feature_kind = "continuous";  // "counts" before normalization
};

struct Dataset {
    std::vector<Slide> slides;  // ascending time_index
    DatasetMeta meta;

    const Slide& slide_at(int time_index) const;
};

struct Microenvironment {
    int center_index = -1;  // cell index within the slide
    int time_index = 0;
    std::vector<int> member_indices;               // -1 on padded slots
    std::vector<std::array<double, 2>> coords;     // one entry per slot
    std::vector<std::vector<double>> features;     // zero vectors on padded slots
    std::vector<std::uint8_t> mask;                // 1 = valid
    bool radius_bound = true;                      // false for random-cloud mode

    int valid_count() const;
};

// Cell-table I/O. Columns: time,x,y,f0..f{D-1}[,type][,sample_id]; '#' starts
// a comment line. The metadata sidecar lives at <path>.meta.
std::vector<Slide> load_slides(const std::string& path);
Dataset load_dataset(const std::string& path);
void save_dataset(const std::string& path, const Dataset& ds);
// Generated output keeps the same table format plus a sample_id column.
void save_generated(const std::string& path, const std::vector<Slide>& slides,
                    const std::vector<int>& sample_ids);
std::string meta_path(const std::string& cells_path);

// Preprocessing stages, fixed order: normalize -> log1p -> pca -> standardize.
// Each operates on a feature matrix [n_cells x dim] flattened row-major.
struct Matrix {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<double> v;
    double& at(std::int64_t r, std::int64_t c) { return v[static_cast<std::size_t>(r * cols + c)]; }
    double at(std::int64_t r, std::int64_t c) const { return v[static_cast<std::size_t>(r * cols + c)]; }
};

// Scales each row to the median of the original row sums.
Matrix total_count_normalize(const Matrix& raw);
Matrix log1p_transform(const Matrix& features);

struct PcaResult {
    Matrix embedding;                 // n x n_components
    Matrix basis;                     // dim x n_components, orthonormal columns
    std::vector<double> mean;         // per input dimension
    std::vector<double> explained;    // non-increasing variances
};
// Deterministic sign convention: the largest-magnitude loading of each
// component is positive.
PcaResult pca(const Matrix& features, int n_components);

// Pooled (all cells, all slides) zero-mean unit-variance features.
Matrix standardize_features(const Matrix& embedding);
// Per-slide, per-axis standardization of coordinates, in place.
void standardize_coords(std::vector<Slide>& slides);

std::vector<Microenvironment> extract_microenvironments(const Slide& slide, double radius);
// Fixes every environment to the modal member count of the set (ties toward
// the smaller count). Oversized environments are subsampled uniformly without
// replacement keeping the center; undersized ones get masked zero slots.
std::vector<Microenvironment> standardize_env_size(const std::vector<Microenvironment>& envs, Rng& rng);
// Same, but to an explicit slot count (evaluation sets reuse the training k).
std::vector<Microenvironment> standardize_env_size_to(const std::vector<Microenvironment>& envs, int k, Rng& rng);
int modal_env_size(const std::vector<Microenvironment>& envs);

struct KmeansResult {
    std::vector<int> labels;
    std::vector<std::array<double, 2>> centers;
    int iterations = 0;
    double inertia = 0.0;                // within-cluster sum of squares
    std::vector<double> inertia_trace;   // one entry per Lloyd assignment
};
// Lloyd iterations with k-means++ seeding; empty clusters reseeded to the
// farthest point. Default K = 64.
KmeansResult kmeans_partition(const std::vector<std::array<double, 2>>& coords, int k, Rng& rng,
                              int max_iter = 100, double tol = 1e-6);

// Regular-grid evaluation environments (deterministic given inputs). Centroid
// = nearest cell to each grid node; random extra centroids are appended up to
// target_count; full coverage is verified, densifying the grid once if needed.
std::vector<Microenvironment> discretized_grid_envs(const Slide& slide, double grid_step, double radius,
                                                    int target_count, Rng& rng);

// Synthetic time-resolved slides: per-type Gaussian blobs whose centers
// translate by `drift` each step and whose populations scale by `growth`.
struct SynthConfig {
    int num_types = 2;
    int num_timepoints = 2;
    std::vector<int> cells_per_type;    // counts at t=0
    std::vector<double> growth;         // per-type population factor per step
    double spatial_radius = 2.5;        // type centers sit on this circle
    double blob_sigma = 0.7;
    std::array<double, 2> drift{1.0, 0.3};
    int feature_dim = 16;
    double feature_separation = 8.0;    // distance between type feature means
    double feature_sigma = 1.0;
};
Dataset synth_generate(const SynthConfig& config, std::uint64_t seed);

}  // namespace nfkit::data
