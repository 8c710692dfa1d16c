#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "elat/data.hpp"
#include "elat/models.hpp"
#include "elat/random.hpp"
#include "elat/tensor.hpp"

namespace elat::generation {

struct GenSpec {
    std::size_t target_class = 0;
    std::size_t k_nn = 10;
    double retained_variance = 0.99;
    double sigma_pca = 0.01;  // std of the alpha coefficients
    double phi = 1.0;
    double zeta = 0.8;
    double eta = 0.05;
    double noise_var = 0.001;
    std::size_t max_iters = 500;
    bool normalize_lambda = true;  // singular values / sqrt(k - 1)
    std::uint64_t seed = 0;

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;
    nlohmann::json to_json() const;
    static GenSpec from_json(const nlohmann::json& j);
};

class GenerationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Whole-image SSIM, K1 = 0.01, K2 = 0.03, dynamic range 1, population
/// (co)variances.
double ssim(std::span<const double> a, std::span<const double> b);

struct Neighbours {
    std::vector<std::size_t> indices;  // best first
    std::vector<double> scores;
};
/// The k samples of class `cls` most similar to x0; ties go to the lower
/// dataset index.
Neighbours select_knn(std::span<const double> x0, const Dataset& data, std::size_t cls, std::size_t k);

struct LocalPca {
    std::vector<double> mean;
    std::vector<std::vector<double>> components;  // m retained unit vectors
    std::vector<double> singular_values;          // all of them, descending
    std::vector<double> explained;                // fraction per component
    double total_variance = 0.0;                  // sum of squared singular values
    bool degenerate = false;
};
/// PCA of the mean-centred rows via SVD; keeps the fewest components whose
/// cumulative explained variance reaches `retained_variance`.
LocalPca fit_local_pca(const std::vector<std::vector<double>>& cluster, double retained_variance);
/// Mean plus the projection of x onto the retained components.
std::vector<double> reconstruct(const LocalPca& pca, std::span<const double> x);

struct PcaInit {
    std::vector<double> x0;
    std::vector<double> alpha;
    std::vector<double> lambda;
    std::optional<std::string> warning;
};
/// x0 = mean + sum_i lambda_i alpha_i U_i, alpha_i ~ N(0, sigma_pca), clamped
/// to [0,1]. A zero-variance cluster yields the mean and a warning.
PcaInit local_pca_init(const std::vector<std::vector<double>>& cluster, const GenSpec& spec, Rng& rng);

struct InversionLoss {
    Tensor loss;  // mean over the batch
    std::vector<std::size_t> rival;  // argmin_{y != target} E(x, y)
};
/// E(x, target) - phi * E(x, rival), from logits [N, K].
InversionLoss inversion_loss(const Tensor& logits, std::size_t target, double phi);
InversionLoss inversion_loss(const Classifier& model, const Tensor& x, std::size_t target, double phi);

struct ClassEnergy {
    double mean = 0.0;
    double stddev = 0.0;  // population
    std::size_t count = 0;
};
/// Per class c: statistics of E(x, c) over the samples labelled c. Empty
/// classes have no entry.
struct ClassEnergyStats {
    std::vector<std::optional<ClassEnergy>> classes;
    double threshold(std::size_t cls) const;  // mean - stddev
};
ClassEnergyStats class_energy_stats(const Classifier& model, const Dataset& data);

struct TraceRow {
    std::size_t iter = 0;
    double e_target = 0.0;
    double e_rival = 0.0;
};

struct GenResult {
    std::vector<double> image;
    std::size_t iterations = 0;
    bool reached_threshold = false;
    std::vector<TraceRow> trace;  // one row per visited iterate, x_0 first
};

class GenerationDiverged : public GenerationError {
public:
    GenerationDiverged(const std::string& what, std::vector<TraceRow> trace)
        : GenerationError(what), trace_(std::move(trace)) {}
    const std::vector<TraceRow>& trace() const { return trace_; }

private:
    std::vector<TraceRow> trace_;
};

/// Momentum SGLD on the inversion loss, projecting x to [0,1] after every
/// step and stopping at the first iterate with E(x, target) below the class
/// threshold or after max_iters steps.
GenResult sgld_generate(const Classifier& model, const GenSpec& spec, const ClassEnergyStats& stats,
                        std::span<const double> x0, Rng& rng);

struct GeneratedSample {
    std::size_t start_index = 0;
    Neighbours cluster;
    PcaInit init;
    GenResult result;
};
/// Full pipeline for `count` samples of spec.target_class. Sample s uses the
/// stream (seed, "generate", target, s) for its start, init and noise.
std::vector<GeneratedSample> generate_class(const Classifier& model, const Dataset& data,
                                            const ClassEnergyStats& stats, const GenSpec& spec, std::size_t count);

/// Binary PGM (1 channel) or PPM (3 channels) from a [C,H,W] image in [0,1].
void write_image(const std::filesystem::path& path, std::span<const double> image, const Shape& shape);
struct Image {
    Shape shape;  // [C,H,W]
    std::vector<double> pixels;
};
Image read_image(const std::filesystem::path& path);
void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> trace);

}  // namespace elat::generation
