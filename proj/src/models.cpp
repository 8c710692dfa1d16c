#include "elat/models.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "elat/ops.hpp"
#include "elat/random.hpp"

namespace elat {

namespace {

constexpr std::size_t kKernel = 3;
constexpr ops::Conv2dParams kConvParams{.stride = 2, .padding = 1};

std::size_t conv_out(std::size_t extent) { return (extent + 2 * kConvParams.padding - kKernel) / 2 + 1; }

std::vector<std::size_t> parse_int_list(std::string_view body, std::string_view text) {
    std::vector<std::size_t> out;
    std::string token;
    std::istringstream in{std::string(body)};
    while (std::getline(in, token, ',')) {
        std::size_t start = token.find_first_not_of(" \t");
        std::size_t end = token.find_last_not_of(" \t");
        if (start == std::string::npos) {
            throw std::invalid_argument("arch '" + std::string(text) + "': empty entry");
        }
        token = token.substr(start, end - start + 1);
        std::size_t used = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(token, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != token.size() || v == 0) {
            throw std::invalid_argument("arch '" + std::string(text) + "': '" + token +
                                        "' is not a positive integer");
        }
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = dist(rng);
    Tensor t = Tensor::from(std::move(shape), std::move(values));
    t.set_requires_grad(true);
    return t;
}

Tensor zero_param(Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape));
    t.set_requires_grad(true);
    return t;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return ops::add(ops::matmul(x, w), b);
}

}  // namespace

ArchDescriptor ArchDescriptor::parse(std::string_view text) {
    const auto open = text.find('(');
    const auto close = text.rfind(')');
    if (open == std::string_view::npos || close == std::string_view::npos || close < open ||
        close + 1 != text.size()) {
        throw std::invalid_argument("arch '" + std::string(text) +
                                    "': expected name(n1,n2,...)");
    }
    const std::string_view name = text.substr(0, open);
    const auto nums = parse_int_list(text.substr(open + 1, close - open - 1), text);
    ArchDescriptor d;
    if (name == "mlp") {
        if (nums.size() < 2) {
            throw std::invalid_argument("arch '" + std::string(text) +
                                        "': mlp needs at least input and output widths");
        }
        d.kind = Kind::mlp;
        d.widths = nums;
    } else if (name == "smallconv") {
        if (nums.size() != 7) {
            throw std::invalid_argument("arch '" + std::string(text) +
                                        "': smallconv takes (C,H,W,c1,c2,hidden,K)");
        }
        d.kind = Kind::smallconv;
        d.in_channels = nums[0];
        d.height = nums[1];
        d.width = nums[2];
        d.channels = {nums[3], nums[4]};
        d.hidden = nums[5];
        d.classes = nums[6];
    } else {
        throw std::invalid_argument("unknown arch '" + std::string(name) +
                                    "' (supported: mlp, smallconv)");
    }
    if (d.num_classes() < 2) {
        throw std::invalid_argument("arch '" + std::string(text) + "': needs at least 2 classes");
    }
    return d;
}

std::string ArchDescriptor::to_string() const {
    std::ostringstream os;
    if (kind == Kind::mlp) {
        os << "mlp(";
        for (std::size_t i = 0; i < widths.size(); ++i) os << (i ? "," : "") << widths[i];
    } else {
        os << "smallconv(" << in_channels << ',' << height << ',' << width << ',' << channels[0]
           << ',' << channels[1] << ',' << hidden << ',' << classes;
    }
    os << ')';
    return os.str();
}

nlohmann::json ArchDescriptor::to_json() const {
    if (kind == Kind::mlp) return {{"kind", "mlp"}, {"widths", widths}};
    return {{"kind", "smallconv"},
            {"input", {in_channels, height, width}},
            {"channels", channels},
            {"hidden", hidden},
            {"classes", classes}};
}

ArchDescriptor ArchDescriptor::from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    std::ostringstream os;
    if (kind == "mlp") {
        os << "mlp(";
        const auto w = j.at("widths").get<std::vector<std::size_t>>();
        for (std::size_t i = 0; i < w.size(); ++i) os << (i ? "," : "") << w[i];
        os << ')';
    } else if (kind == "smallconv") {
        const auto in = j.at("input").get<std::vector<std::size_t>>();
        const auto ch = j.at("channels").get<std::vector<std::size_t>>();
        if (in.size() != 3 || ch.size() != 2) {
            throw std::invalid_argument("smallconv descriptor needs 3 input extents and 2 channels");
        }
        os << "smallconv(" << in[0] << ',' << in[1] << ',' << in[2] << ',' << ch[0] << ','
           << ch[1] << ',' << j.at("hidden").get<std::size_t>() << ','
           << j.at("classes").get<std::size_t>() << ')';
    } else {
        throw std::invalid_argument("unknown arch '" + kind + "'");
    }
    return parse(os.str());
}

Shape ArchDescriptor::input_shape() const {
    if (kind == Kind::mlp) return {widths.front()};
    return {in_channels, height, width};
}

std::size_t ArchDescriptor::num_classes() const {
    return kind == Kind::mlp ? widths.back() : classes;
}

Classifier Classifier::build(const ArchDescriptor& arch, std::uint64_t seed) {
    Classifier c;
    c.arch_ = arch;
    Rng rng = make_rng(seed, "init");
    if (arch.kind == ArchDescriptor::Kind::mlp) {
        for (std::size_t l = 0; l + 1 < arch.widths.size(); ++l) {
            const std::size_t in = arch.widths[l], out = arch.widths[l + 1];
            const std::string tag = "fc" + std::to_string(l);
            c.params_.push_back({tag + ".weight", kaiming_uniform({in, out}, in, rng)});
            c.params_.push_back({tag + ".bias", zero_param({out})});
        }
        return c;
    }
    const std::size_t c1 = arch.channels[0], c2 = arch.channels[1];
    const std::size_t h2 = conv_out(conv_out(arch.height));
    const std::size_t w2 = conv_out(conv_out(arch.width));
    const std::size_t flat = c2 * h2 * w2;
    const std::size_t k2 = kKernel * kKernel;
    c.params_.push_back({"conv0.weight",
                         kaiming_uniform({c1, arch.in_channels, kKernel, kKernel},
                                         arch.in_channels * k2, rng)});
    c.params_.push_back({"conv0.bias", zero_param({c1})});
    c.params_.push_back(
        {"conv1.weight", kaiming_uniform({c2, c1, kKernel, kKernel}, c1 * k2, rng)});
    c.params_.push_back({"conv1.bias", zero_param({c2})});
    c.params_.push_back({"fc0.weight", kaiming_uniform({flat, arch.hidden}, flat, rng)});
    c.params_.push_back({"fc0.bias", zero_param({arch.hidden})});
    c.params_.push_back(
        {"fc1.weight", kaiming_uniform({arch.hidden, arch.classes}, arch.hidden, rng)});
    c.params_.push_back({"fc1.bias", zero_param({arch.classes})});
    return c;
}

Tensor Classifier::logits(const Tensor& x) const {
    const Shape in = input_shape();
    if (x.rank() != in.size() + 1 || !std::equal(in.begin(), in.end(), x.shape().begin() + 1)) {
        throw ShapeError("logits: input " + shape_str(x.shape()) + " does not match [batch," +
                         shape_str(in).substr(1));
    }
    const std::size_t batch = x.dim(0);
    if (arch_.kind == ArchDescriptor::Kind::mlp) {
        Tensor h = x;
        const std::size_t layers = params_.size() / 2;
        for (std::size_t l = 0; l < layers; ++l) {
            h = linear(h, params_[2 * l].value, params_[2 * l + 1].value);
            if (l + 1 < layers) h = ops::relu(h);
        }
        return h;
    }
    Tensor h = ops::relu(ops::conv2d(x, params_[0].value, params_[1].value, kConvParams));
    h = ops::relu(ops::conv2d(h, params_[2].value, params_[3].value, kConvParams));
    h = ops::reshape(h, {batch, h.numel() / batch});
    h = ops::relu(linear(h, params_[4].value, params_[5].value));
    return linear(h, params_[6].value, params_[7].value);
}

std::size_t Classifier::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
}

std::vector<double> Classifier::flat_parameters() const {
    std::vector<double> flat;
    flat.reserve(parameter_count());
    for (const auto& p : params_) flat.insert(flat.end(), p.value.data().begin(), p.value.data().end());
    return flat;
}

void Classifier::load_flat_parameters(std::span<const double> flat) {
    if (flat.size() != parameter_count()) {
        throw std::invalid_argument("parameter blob has " + std::to_string(flat.size()) +
                                    " values, model " + arch_.to_string() + " needs " +
                                    std::to_string(parameter_count()));
    }
    std::size_t off = 0;
    for (auto& p : params_) {
        auto dst = p.value.mutable_data();
        std::copy(flat.begin() + off, flat.begin() + off + dst.size(), dst.begin());
        off += dst.size();
        p.value.zero_grad();
    }
}

Classifier Classifier::clone() const {
    Classifier c;
    c.arch_ = arch_;
    for (const auto& p : params_) c.params_.push_back({p.name, p.value.clone()});
    return c;
}

Checkpoint Checkpoint::of(const Classifier& model) {
    Checkpoint c;
    c.arch = model.arch();
    c.parameters = model.flat_parameters();
    return c;
}

Classifier Checkpoint::restore() const {
    Classifier model = Classifier::build(arch, 0);
    model.load_flat_parameters(parameters);
    return model;
}

namespace {

template <class T>
void write_le(std::ostream& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T read_le(std::istream& in, const std::filesystem::path& path, const char* what) {
    unsigned char bytes[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
        throw std::runtime_error(path.string() + ": truncated checkpoint while reading " + what);
    }
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

void write_blob(std::ostream& out, std::span<const double> values) {
    write_le<std::uint64_t>(out, values.size());
    for (double v : values) write_le(out, v);
}

std::vector<double> read_blob(std::istream& in, const std::filesystem::path& path,
                              const char* what) {
    const auto n = read_le<std::uint64_t>(in, path, what);
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(n, 1u << 24)));
    for (std::uint64_t i = 0; i < n; ++i) values.push_back(read_le<double>(in, path, what));
    return values;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    nlohmann::json header = {{"arch", ckpt.arch.to_json()},
                             {"seed", ckpt.seed},
                             {"epoch", ckpt.epoch},
                             {"meta", ckpt.meta}};
    const std::string text = header.dump();
    // Write to a sibling file first so a crash never leaves a torn checkpoint.
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out.write("ELAT", 4);
        write_le<std::uint32_t>(out, Checkpoint::kVersion);
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        write_blob(out, ckpt.parameters);
        if (!ckpt.momentum.empty()) {
            out.write("MOMT", 4);
            write_blob(out, ckpt.momentum);
        }
        if (!out) throw std::runtime_error("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "ELAT", 4) != 0) {
        throw std::runtime_error(path.string() + ": not an ELAT checkpoint (bad magic)");
    }
    const auto version = read_le<std::uint32_t>(in, path, "version");
    if (version != Checkpoint::kVersion) {
        throw std::runtime_error(path.string() + ": unsupported checkpoint version " +
                                 std::to_string(version));
    }
    const auto len = read_le<std::uint32_t>(in, path, "header length");
    std::string text(len, '\0');
    if (!in.read(text.data(), len)) {
        throw std::runtime_error(path.string() + ": truncated checkpoint header");
    }
    const auto header = nlohmann::json::parse(text);
    Checkpoint c;
    c.arch = ArchDescriptor::from_json(header.at("arch"));
    c.seed = header.value("seed", std::uint64_t{0});
    c.epoch = header.value("epoch", std::size_t{0});
    c.meta = header.value("meta", nlohmann::json::object());
    c.parameters = read_blob(in, path, "parameters");
    const std::size_t expected = Classifier::build(c.arch, 0).parameter_count();
    if (c.parameters.size() != expected) {
        throw std::runtime_error(path.string() + ": " + std::to_string(c.parameters.size()) +
                                 " parameters stored but " + c.arch.to_string() + " has " +
                                 std::to_string(expected));
    }
    char tag[4];
    if (in.read(tag, 4)) {
        if (std::memcmp(tag, "MOMT", 4) != 0) {
            throw std::runtime_error(path.string() + ": unknown trailing section");
        }
        c.momentum = read_blob(in, path, "momentum");
        if (c.momentum.size() != expected) {
            throw std::runtime_error(path.string() + ": momentum size mismatch");
        }
    }
    return c;
}

}  // namespace elat
