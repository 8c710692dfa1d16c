#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "elat/attacks.hpp"
#include "elat/data.hpp"
#include "elat/generation.hpp"
#include "elat/telemetry.hpp"
#include "elat/training.hpp"

namespace elat::config {

/// Invalid or incomplete configuration. The message starts with the key path.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DataConfig {
    std::string source;  // blobs | moons | tiny_shapes | idx
    std::size_t n = 400;
    double noise = 0.1;
    std::size_t classes = 2;
    std::size_t n_per_class = 50;
    std::size_t size = 16;
    std::filesystem::path images;
    std::filesystem::path labels;
    std::vector<std::size_t> digits;  // idx: keep and relabel these
    std::optional<std::size_t> per_class;
    double test_fraction = 0.2;
};

struct GenConfig {
    generation::GenSpec spec;
    std::vector<std::size_t> classes;  // empty: every class
    std::size_t count = 4;             // samples per class
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "elat_out";
    DataConfig data;
    std::string arch;
    attacks::AttackSpec attack;
    training::TrainSpec train;
    GenConfig gen;
    telemetry::Options telemetry;
    std::set<std::string> given;  // key paths present in the source document

    bool has(const std::string& key) const { return given.count(key) > 0; }
    /// Throws ConfigError naming the first missing key among `keys`.
    void require(std::initializer_list<const char*> keys) const;
    /// Re-applies the root seed to every sub-spec after an override.
    void set_seed(std::uint64_t s);
};

/// Parses an INI document. Relative data paths resolve against `base_dir`.
RunConfig parse(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig load(const std::filesystem::path& path);

/// Fully resolved INI echo; parse(echo(c)) reproduces c.
std::string echo(const RunConfig& cfg);

struct Splits {
    Dataset train;
    std::optional<Dataset> test;
};
/// Builds the configured dataset and its seeded train/test split.
Splits load_data(const RunConfig& cfg);

/// ELAT_THREADS as a positive integer (1 when unset); throws ConfigError on
/// malformed values.
std::size_t thread_cap();

}  // namespace elat::config
