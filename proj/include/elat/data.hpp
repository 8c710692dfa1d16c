#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "elat/tensor.hpp"

namespace elat {

enum class Split { train, test };

std::string_view to_string(Split s);

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Labeled inputs in [0,1]. Immutable after construction; validate() runs in
/// the constructor.
class Dataset {
public:
    Dataset(Tensor inputs, std::vector<std::size_t> labels, std::size_t num_classes,
            Split split = Split::train);

    std::size_t size() const { return labels_.size(); }
    std::size_t num_classes() const { return num_classes_; }
    Split split() const { return split_; }
    /// Per-sample extents, without the leading sample dimension.
    Shape sample_shape() const;
    std::size_t sample_numel() const;

    const Tensor& inputs() const { return inputs_; }
    std::span<const std::size_t> labels() const { return labels_; }
    std::size_t label(std::size_t i) const { return labels_.at(i); }
    std::span<const double> sample(std::size_t i) const;

    /// Inputs of the given rows stacked as a fresh [indices.size(), ...] tensor.
    Tensor batch(std::span<const std::size_t> indices) const;
    std::vector<std::size_t> batch_labels(std::span<const std::size_t> indices) const;

    Dataset subset(std::span<const std::size_t> indices, std::optional<Split> split = {}) const;
    /// Indices of all samples with label c, ascending.
    std::vector<std::size_t> class_indices(std::size_t c) const;

private:
    Tensor inputs_;
    std::vector<std::size_t> labels_;
    std::size_t num_classes_;
    Split split_;
};

/// Gaussian blobs around `classes` centers on the unit circle, rescaled to
/// [0,1]^2. Labels cycle 0,1,...,K-1.
Dataset make_blobs(std::size_t n, double noise, std::uint64_t seed, std::size_t classes = 2);
/// Two interleaving half circles, rescaled to [0,1]^2.
Dataset make_moons(std::size_t n, double noise, std::uint64_t seed);

/// Grayscale [1,size,size] images. Class c draws shape c of: disk, square,
/// horizontal bar, vertical bar, ring, cross; each with small random offset,
/// scale and intensity.
Dataset make_tiny_shapes(std::size_t n_per_class, std::size_t size, std::uint64_t seed,
                         std::size_t classes = 5);
inline constexpr std::size_t kTinyShapeKinds = 6;

/// MNIST-style IDX pair: images magic 0x00000803 [n,rows,cols] u8, labels magic
/// 0x00000801 [n] u8. Pixels are divided by 255. The class count is
/// max(label)+1 unless `num_classes` is given.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::optional<std::size_t> num_classes = {}, Split split = Split::train);
/// Writes grayscale datasets ([n,1,h,w] or [n,h,w]); pixels rounded to the
/// nearest multiple of 1/255.
void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
               const Dataset& data);

/// Keeps samples whose label is in `classes` (first `per_class` of each when
/// given) and relabels them 0..classes.size()-1 in the listed order.
Dataset filter_classes(const Dataset& data, std::span<const std::size_t> classes,
                       std::optional<std::size_t> per_class = {});

/// Seeded shuffle into disjoint train/test parts.
std::pair<Dataset, Dataset> train_test_split(const Dataset& data, std::size_t n_test,
                                             std::uint64_t seed);

/// One row per sample: label, x0, x1, ...
void export_csv(const std::filesystem::path& path, const Dataset& data);

}  // namespace elat
