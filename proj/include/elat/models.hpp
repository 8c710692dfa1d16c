#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "elat/tensor.hpp"

namespace elat {

/// Layer-list description of a supported classifier.
///
///   mlp(d, h1, ..., K)              fully connected ReLU net
///   smallconv(C, H, W, c1, c2, h, K) two 3x3 stride-2 convolutions followed by
///                                   two fully connected layers
struct ArchDescriptor {
    enum class Kind { mlp, smallconv };

    Kind kind = Kind::mlp;
    std::vector<std::size_t> widths;  // mlp: input, hidden..., classes
    std::size_t in_channels = 0;      // smallconv only from here on
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::size_t> channels;
    std::size_t hidden = 0;
    std::size_t classes = 0;

    static ArchDescriptor parse(std::string_view text);
    static ArchDescriptor from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    std::string to_string() const;

    /// Per-sample input extents (without the batch dimension).
    Shape input_shape() const;
    std::size_t num_classes() const;

    bool operator==(const ArchDescriptor&) const = default;
};

struct NamedParameter {
    std::string name;
    Tensor value;
};

class Classifier {
public:
    /// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases, all drawn
    /// from `seed`.
    static Classifier build(const ArchDescriptor& arch, std::uint64_t seed);

    /// x: [batch, input_shape...] -> [batch, K]. Differentiable in x and in
    /// the parameters.
    Tensor logits(const Tensor& x) const;

    const ArchDescriptor& arch() const { return arch_; }
    std::size_t num_classes() const { return arch_.num_classes(); }
    Shape input_shape() const { return arch_.input_shape(); }

    std::span<NamedParameter> parameters() { return params_; }
    std::span<const NamedParameter> parameters() const { return params_; }
    std::size_t parameter_count() const;

    std::vector<double> flat_parameters() const;
    void load_flat_parameters(std::span<const double> flat);

    /// Deep copy with independent parameter storage.
    Classifier clone() const;

private:
    ArchDescriptor arch_;
    std::vector<NamedParameter> params_;
};

/// Everything needed to resume or re-evaluate a run.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    ArchDescriptor arch;
    std::vector<double> parameters;
    std::vector<double> momentum;  // optimizer state; empty when absent
    std::uint64_t seed = 0;        // root seed; per-epoch streams derive from it
    std::size_t epoch = 0;         // number of completed epochs
    nlohmann::json meta = nlohmann::json::object();

    static Checkpoint of(const Classifier& model);
    Classifier restore() const;
};

// File layout (little-endian):
//   "ELAT" | u32 version | u32 header length | UTF-8 JSON header
//   | u64 parameter count | f64 parameters...
//   [ "MOMT" | u64 count | f64 momentum... ]
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace elat
