#include "elat/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <string>

#include "elat/random.hpp"

namespace elat {

std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }

Dataset::Dataset(Tensor inputs, std::vector<std::size_t> labels, std::size_t num_classes, Split split)
    : inputs_(inputs.detach()), labels_(std::move(labels)), num_classes_(num_classes), split_(split) {
    if (labels_.empty()) throw DataError("dataset: no samples");
    if (num_classes_ < 2) throw DataError("dataset: need at least 2 classes");
    if (inputs_.rank() < 2 || inputs_.dim(0) != labels_.size()) {
        throw DataError("dataset: inputs " + shape_str(inputs_.shape()) + " do not match " +
                        std::to_string(labels_.size()) + " labels");
    }
    for (double v : inputs_.data()) {
        if (!(v >= 0.0 && v <= 1.0)) throw DataError("dataset: input value outside [0,1]");
    }
    for (std::size_t y : labels_) {
        if (y >= num_classes_) {
            throw DataError("dataset: label " + std::to_string(y) + " outside [0," +
                            std::to_string(num_classes_) + ")");
        }
    }
}

Shape Dataset::sample_shape() const { return Shape(inputs_.shape().begin() + 1, inputs_.shape().end()); }

std::size_t Dataset::sample_numel() const { return inputs_.numel() / size(); }

std::span<const double> Dataset::sample(std::size_t i) const {
    if (i >= size()) throw std::out_of_range("dataset: sample index out of range");
    return inputs_.data().subspan(i * sample_numel(), sample_numel());
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
    const std::size_t d = sample_numel();
    std::vector<double> values;
    values.reserve(indices.size() * d);
    for (std::size_t i : indices) {
        auto row = sample(i);
        values.insert(values.end(), row.begin(), row.end());
    }
    Shape shape = sample_shape();
    shape.insert(shape.begin(), indices.size());
    return Tensor::from(std::move(shape), std::move(values));
}

std::vector<std::size_t> Dataset::batch_labels(std::span<const std::size_t> indices) const {
    std::vector<std::size_t> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(labels_.at(i));
    return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices, std::optional<Split> split) const {
    return Dataset(batch(indices), batch_labels(indices), num_classes_, split.value_or(split_));
}

std::vector<std::size_t> Dataset::class_indices(std::size_t c) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i) {
        if (labels_[i] == c) out.push_back(i);
    }
    return out;
}

namespace {

// Min-max rescale each of the two coordinates into [0,1]; a constant
// coordinate maps to 0.5.
void rescale_2d(std::vector<double>& xy) {
    for (std::size_t axis = 0; axis < 2; ++axis) {
        double lo = INFINITY, hi = -INFINITY;
        for (std::size_t i = axis; i < xy.size(); i += 2) {
            lo = std::min(lo, xy[i]);
            hi = std::max(hi, xy[i]);
        }
        for (std::size_t i = axis; i < xy.size(); i += 2) {
            xy[i] = hi > lo ? std::clamp((xy[i] - lo) / (hi - lo), 0.0, 1.0) : 0.5;
        }
    }
}

bool shape_contains(std::size_t kind, double u, double v) {
    const double au = std::abs(u), av = std::abs(v);
    const double r2 = u * u + v * v;
    switch (kind) {
        case 0: return r2 <= 0.30 * 0.30;
        case 1: return au <= 0.26 && av <= 0.26;
        case 2: return au <= 0.38 && av <= 0.11;
        case 3: return au <= 0.11 && av <= 0.38;
        case 4: return r2 <= 0.36 * 0.36 && r2 >= 0.20 * 0.20;
        default: return (au <= 0.36 && av <= 0.09) || (au <= 0.09 && av <= 0.36);
    }
}

std::uint32_t read_be32(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

void write_be32(std::ostream& out, std::uint32_t v) {
    const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
    out.write(b, 4);
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

Dataset make_blobs(std::size_t n, double noise, std::uint64_t seed, std::size_t classes) {
    if (classes < 2) throw std::invalid_argument("make_blobs: need at least 2 classes");
    if (n < classes) throw std::invalid_argument("make_blobs: n must be >= number of classes");
    if (!(noise >= 0.0)) throw std::invalid_argument("make_blobs: noise must be >= 0");
    Rng rng = make_rng(seed, "blobs");
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> xy(2 * n);
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % classes;
        const double angle = 2.0 * std::numbers::pi * double(c) / double(classes);
        labels[i] = c;
        xy[2 * i] = std::cos(angle) + noise * gauss(rng);
        xy[2 * i + 1] = std::sin(angle) + noise * gauss(rng);
    }
    rescale_2d(xy);
    return Dataset(Tensor::from({n, 2}, std::move(xy)), std::move(labels), classes);
}

Dataset make_moons(std::size_t n, double noise, std::uint64_t seed) {
    if (n < 2) throw std::invalid_argument("make_moons: n must be >= 2");
    if (!(noise >= 0.0)) throw std::invalid_argument("make_moons: noise must be >= 0");
    Rng rng = make_rng(seed, "moons");
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t n_outer = (n + 1) / 2, n_inner = n - n_outer;
    std::vector<double> xy(2 * n);
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        const bool outer = i % 2 == 0;
        const std::size_t j = i / 2;
        const std::size_t count = outer ? n_outer : n_inner;
        const double t = count > 1 ? std::numbers::pi * double(j) / double(count - 1) : 0.0;
        labels[i] = outer ? 0 : 1;
        xy[2 * i] = (outer ? std::cos(t) : 1.0 - std::cos(t)) + noise * gauss(rng);
        xy[2 * i + 1] = (outer ? std::sin(t) : 0.5 - std::sin(t)) + noise * gauss(rng);
    }
    rescale_2d(xy);
    return Dataset(Tensor::from({n, 2}, std::move(xy)), std::move(labels), 2);
}

Dataset make_tiny_shapes(std::size_t n_per_class, std::size_t size, std::uint64_t seed,
                         std::size_t classes) {
    if (size < 8) throw std::invalid_argument("make_tiny_shapes: size must be >= 8");
    if (classes < 2 || classes > kTinyShapeKinds) {
        throw std::invalid_argument("make_tiny_shapes: classes must be in [2, " +
                                    std::to_string(kTinyShapeKinds) + "]");
    }
    if (n_per_class == 0) throw std::invalid_argument("make_tiny_shapes: n_per_class must be > 0");
    constexpr int kSuper = 4;
    Rng rng = make_rng(seed, "tiny_shapes");
    std::uniform_real_distribution<double> offset(-0.25, 0.25), scale(0.95, 1.05), intensity(0.85, 1.0);
    std::normal_distribution<double> pixel_noise(0.0, 0.02);
    const std::size_t n = n_per_class * classes, d = size * size;
    std::vector<double> pixels(n * d);
    std::vector<std::size_t> labels(n);
    const double s = double(size);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % classes;
        labels[i] = c;
        const double cx = s / 2 + offset(rng), cy = s / 2 + offset(rng);
        const double k = scale(rng), level = intensity(rng);
        for (std::size_t r = 0; r < size; ++r) {
            for (std::size_t col = 0; col < size; ++col) {
                int hits = 0;
                for (int a = 0; a < kSuper; ++a) {
                    for (int b = 0; b < kSuper; ++b) {
                        const double py = double(r) + (a + 0.5) / kSuper;
                        const double px = double(col) + (b + 0.5) / kSuper;
                        hits += shape_contains(c, (px - cx) / (s * k), (py - cy) / (s * k));
                    }
                }
                const double v = level * hits / double(kSuper * kSuper) + pixel_noise(rng);
                pixels[i * d + r * size + col] = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return Dataset(Tensor::from({n, 1, size, size}, std::move(pixels)), std::move(labels), classes);
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::optional<std::size_t> num_classes, Split split) {
    const auto img = read_file(images);
    const auto lab = read_file(labels);
    if (img.size() < 16 || read_be32(img.data()) != 0x00000803) {
        throw DataError("bad IDX image magic in " + images.string());
    }
    if (lab.size() < 8 || read_be32(lab.data()) != 0x00000801) {
        throw DataError("bad IDX label magic in " + labels.string());
    }
    const std::size_t n = read_be32(img.data() + 4);
    const std::size_t rows = read_be32(img.data() + 8);
    const std::size_t cols = read_be32(img.data() + 12);
    const std::size_t n_labels = read_be32(lab.data() + 4);
    if (n != n_labels) {
        throw DataError("IDX count mismatch: " + std::to_string(n) + " images in " + images.string() +
                        " vs " + std::to_string(n_labels) + " labels in " + labels.string());
    }
    if (img.size() != 16 + n * rows * cols) throw DataError("truncated or oversized IDX file " + images.string());
    if (lab.size() != 8 + n) throw DataError("truncated or oversized IDX file " + labels.string());
    if (n == 0) throw DataError("empty IDX file " + images.string());

    std::vector<double> pixels(n * rows * cols);
    for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = img[16 + i] / 255.0;
    std::vector<std::size_t> y(lab.begin() + 8, lab.end());
    const std::size_t k = num_classes.value_or(*std::max_element(y.begin(), y.end()) + 1);
    return Dataset(Tensor::from({n, 1, rows, cols}, std::move(pixels)), std::move(y), std::max<std::size_t>(k, 2),
                   split);
}

void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
               const Dataset& data) {
    const Shape s = data.sample_shape();
    const bool gray = (s.size() == 3 && s[0] == 1) || s.size() == 2;
    if (!gray) throw DataError("write_idx: only grayscale [1,h,w] or [h,w] samples are supported");
    if (data.num_classes() > 256) throw DataError("write_idx: labels must fit in a byte");
    const std::size_t rows = s[s.size() - 2], cols = s[s.size() - 1];
    {
        std::ofstream out(images, std::ios::binary);
        if (!out) throw DataError("cannot write " + images.string());
        write_be32(out, 0x00000803);
        write_be32(out, std::uint32_t(data.size()));
        write_be32(out, std::uint32_t(rows));
        write_be32(out, std::uint32_t(cols));
        for (double v : data.inputs().data()) out.put(char(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
    std::ofstream out(labels, std::ios::binary);
    if (!out) throw DataError("cannot write " + labels.string());
    write_be32(out, 0x00000801);
    write_be32(out, std::uint32_t(data.size()));
    for (std::size_t y : data.labels()) out.put(char(static_cast<unsigned char>(y)));
}

Dataset filter_classes(const Dataset& data, std::span<const std::size_t> classes,
                       std::optional<std::size_t> per_class) {
    if (classes.size() < 2) throw std::invalid_argument("filter_classes: need at least 2 classes");
    std::vector<std::size_t> keep, relabel, taken(classes.size(), 0);
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto it = std::find(classes.begin(), classes.end(), data.label(i));
        if (it == classes.end()) continue;
        const std::size_t c = std::size_t(it - classes.begin());
        if (per_class && taken[c] >= *per_class) continue;
        ++taken[c];
        keep.push_back(i);
        relabel.push_back(c);
    }
    if (keep.empty()) throw DataError("filter_classes: no samples of the requested classes");
    return Dataset(data.batch(keep), std::move(relabel), classes.size(), data.split());
}

std::pair<Dataset, Dataset> train_test_split(const Dataset& data, std::size_t n_test, std::uint64_t seed) {
    if (n_test == 0 || n_test >= data.size()) {
        throw std::invalid_argument("train_test_split: n_test must be in [1, n)");
    }
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = make_rng(seed, "split");
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> test(order.begin(), order.begin() + std::ptrdiff_t(n_test));
    std::vector<std::size_t> train(order.begin() + std::ptrdiff_t(n_test), order.end());
    std::sort(test.begin(), test.end());
    std::sort(train.begin(), train.end());
    return {data.subset(train, Split::train), data.subset(test, Split::test)};
}

void export_csv(const std::filesystem::path& path, const Dataset& data) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "label";
    for (std::size_t j = 0; j < data.sample_numel(); ++j) out << ",x" << j;
    out << '\n';
    char buf[32];
    for (std::size_t i = 0; i < data.size(); ++i) {
        out << data.label(i);
        for (double v : data.sample(i)) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            out << ',' << buf;
        }
        out << '\n';
    }
}

}  // namespace elat
