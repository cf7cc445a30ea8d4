#include "advseg/networks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

#include "advseg/layers.hpp"

namespace advseg {

LayerSpec LayerSpec::conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t dilation) {
    LayerSpec l{LayerKind::Conv};
    l.in_channels = in;
    l.out_channels = out;
    l.kernel = kernel;
    l.dilation = dilation;
    l.padding = dilation * (kernel - 1) / 2;
    return l;
}

namespace {

std::string param_prefix(bool image_branch, std::size_t index) {
    return (image_branch ? "image.conv" : "conv") + std::to_string(index);
}

// Returns output channels of a layer list given its input channels; throws on
// a broken chain. `merge` is the channel count added at ConcatBranches.
std::size_t chain_channels(const std::vector<LayerSpec>& layers, std::size_t channels,
                           std::size_t merge, std::string_view where) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        switch (l.kind) {
            case LayerKind::Conv:
                if (l.in_channels != channels) {
                    throw std::invalid_argument(std::string(where) + " layer " + std::to_string(i) +
                                                ": expects " + std::to_string(l.in_channels) +
                                                " channels, receives " + std::to_string(channels));
                }
                if (l.kernel == 0 || l.stride == 0 || l.dilation == 0 || l.out_channels == 0) {
                    throw std::invalid_argument(std::string(where) + ": degenerate conv layer");
                }
                channels = l.out_channels;
                break;
            case LayerKind::ConcatBranches:
                if (merge == 0) throw std::invalid_argument(std::string(where) + ": concat without branch");
                channels += merge;
                break;
            case LayerKind::SliceChannel:
                if (l.out_channels >= channels) throw std::invalid_argument("slice index out of range");
                channels = 1;
                break;
            case LayerKind::ChannelSoftmax:
                if (channels < 2) throw std::invalid_argument("softmax over fewer than 2 channels");
                break;
            default:
                break;
        }
    }
    return channels;
}

}  // namespace

std::size_t NetSpec::output_channels() const {
    const std::size_t merge =
        two_branch() ? chain_channels(image_branch, image_channels, 0, "image branch") : 0;
    return chain_channels(layers, input_channels, merge, "main branch");
}

void NetSpec::validate() const {
    const std::size_t out = output_channels();
    const auto concat_count = std::count_if(layers.begin(), layers.end(), [](const LayerSpec& l) {
        return l.kind == LayerKind::ConcatBranches;
    });
    if (two_branch() != (concat_count == 1)) {
        throw std::invalid_argument("NetSpec: image branch requires exactly one concat layer");
    }
    if (role == NetRole::Adversary && out != 1) {
        throw std::invalid_argument("NetSpec: adversary must end in a single probability channel");
    }
}

NetSpec build_segmenter(std::size_t classes, std::size_t channels_base, std::size_t context_layers,
                        std::size_t input_channels) {
    if (classes < 2) throw std::invalid_argument("build_segmenter: need at least 2 classes");
    NetSpec s;
    s.role = NetRole::Segmenter;
    s.input_channels = input_channels;
    s.stride = 2;
    const std::size_t b = channels_base;
    s.layers = {LayerSpec::conv(input_channels, b, 3), LayerSpec::of(LayerKind::Relu),
                LayerSpec::conv(b, b, 3), LayerSpec::of(LayerKind::Relu),
                LayerSpec::of(LayerKind::MaxPool2)};
    std::size_t dilation = 1;
    for (std::size_t i = 0; i < context_layers; ++i, dilation *= 2) {
        s.layers.push_back(LayerSpec::conv(b, b, 3, dilation));
        s.layers.push_back(LayerSpec::of(LayerKind::Relu));
    }
    s.layers.push_back(LayerSpec::conv(b, classes, 1));
    s.layers.push_back(LayerSpec::of(LayerKind::ChannelSoftmax));
    s.validate();
    return s;
}

NetSpec build_adversary(const AdversaryOptions& o) {
    // Relative widths follow the layer pattern of the reference adversaries.
    const std::size_t mult[6] = {1, 1, 1, 2, 2, 4};
    std::size_t w[6];
    for (int i = 0; i < 6; ++i) {
        w[i] = o.base_width * mult[i];
        if (o.capacity == Capacity::Light) w[i] = std::max<std::size_t>(1, w[i] / 2);
    }
    const std::size_t head_out = o.head == AdversaryHead::Sigmoid ? 1 : 2;

    NetSpec s;
    s.role = NetRole::Adversary;
    s.input_channels = o.input_channels;
    const auto relu = LayerSpec::of(LayerKind::Relu);
    const auto pool = LayerSpec::of(LayerKind::MaxPool2);

    s.layers = {LayerSpec::conv(o.input_channels, w[0], 3), relu};
    std::size_t merged = w[0];
    if (o.two_branch) {
        // Both signals enter the trunk with the same channel count.
        s.image_channels = o.image_channels;
        s.image_branch = {LayerSpec::conv(o.image_channels, w[0], 3), relu};
        s.layers.push_back(LayerSpec::of(LayerKind::ConcatBranches));
        merged = 2 * w[0];
    }
    if (o.fov == FieldOfView::Large) {
        s.layers.insert(s.layers.end(),
                        {LayerSpec::conv(merged, w[1], 3), relu, LayerSpec::conv(w[1], w[2], 3), relu,
                         pool, LayerSpec::conv(w[2], w[3], 3), relu, LayerSpec::conv(w[3], w[4], 3),
                         relu, pool, LayerSpec::conv(w[4], w[5], 3), relu,
                         LayerSpec::conv(w[5], head_out, 3)});
    } else {
        s.layers.insert(s.layers.end(),
                        {LayerSpec::conv(merged, w[1], 1), relu, pool, LayerSpec::conv(w[1], w[3], 3),
                         relu, LayerSpec::conv(w[3], w[4], 1), relu, pool,
                         LayerSpec::conv(w[4], w[5], 3), relu, LayerSpec::conv(w[5], head_out, 1)});
    }
    if (o.head == AdversaryHead::Sigmoid) {
        s.layers.push_back(LayerSpec::of(LayerKind::Sigmoid));
    } else {
        s.layers.push_back(LayerSpec::of(LayerKind::ChannelSoftmax));
        LayerSpec take{LayerKind::SliceChannel};
        take.out_channels = 1;  // probability of "ground truth"
        s.layers.push_back(take);
    }
    s.validate();
    return s;
}

ReceptiveField receptive_field(const NetSpec& spec) {
    ReceptiveField rf;
    for (const auto& l : spec.layers) {
        switch (l.kind) {
            case LayerKind::Conv: {
                const std::size_t grow = (l.kernel - 1) * l.dilation * rf.stride;
                rf.offset -= static_cast<long>(l.padding * rf.stride);
                rf.rf_h += grow;
                rf.rf_w += grow;
                rf.stride *= l.stride;
                break;
            }
            case LayerKind::MaxPool2:
                rf.rf_h += rf.stride;
                rf.rf_w += rf.stride;
                rf.stride *= 2;
                break;
            case LayerKind::Relu:
            case LayerKind::Sigmoid:
            case LayerKind::ChannelSoftmax:
            case LayerKind::SliceChannel:
            case LayerKind::ConcatBranches:
                break;
        }
    }
    return rf;
}

// ---- ModelParams -------------------------------------------------------------

void ModelParams::add(std::string name, Tensor value) {
    if (contains(name)) throw std::invalid_argument("ModelParams: duplicate name " + name);
    entries_.emplace_back(std::move(name), std::move(value));
}

const Tensor& ModelParams::get(std::string_view name) const {
    for (const auto& [n, t] : entries_)
        if (n == name) return t;
    throw std::out_of_range("ModelParams: no parameter named " + std::string(name));
}

Tensor& ModelParams::get(std::string_view name) {
    for (auto& [n, t] : entries_)
        if (n == name) return t;
    throw std::out_of_range("ModelParams: no parameter named " + std::string(name));
}

bool ModelParams::contains(std::string_view name) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
}

ModelParams ModelParams::clone() const {
    ModelParams out;
    for (const auto& [n, t] : entries_) out.add(n, t.clone(t.requires_grad()));
    return out;
}

ModelParams ModelParams::frozen() const {
    ModelParams out;
    for (const auto& [n, t] : entries_) out.add(n, t.detach());
    return out;
}

void ModelParams::zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
}

bool ModelParams::values_equal(const ModelParams& other) const {
    if (size() != other.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const auto& [na, ta] = entries_[i];
        const auto& [nb, tb] = other.entries_[i];
        if (na != nb || ta.shape() != tb.shape()) return false;
        auto a = ta.data(), b = tb.data();
        if (std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) return false;
    }
    return true;
}

ModelParams init_params(const NetSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    ModelParams params;
    auto init_list = [&](const std::vector<LayerSpec>& layers, bool image) {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            if (l.kind != LayerKind::Conv) continue;
            const double fan_in = static_cast<double>(l.in_channels * l.kernel * l.kernel);
            const double fan_out = static_cast<double>(l.out_channels * l.kernel * l.kernel);
            const double bound = std::sqrt(6.0 / (fan_in + fan_out));
            std::uniform_real_distribution<double> dist(-bound, bound);
            std::vector<double> k(l.out_channels * l.in_channels * l.kernel * l.kernel);
            for (auto& v : k) v = dist(rng);
            const std::string prefix = param_prefix(image, i);
            params.add(prefix + ".weight",
                       Tensor({l.out_channels, l.in_channels, l.kernel, l.kernel}, std::move(k), true));
            params.add(prefix + ".bias", Tensor::zeros({l.out_channels}, true));
        }
    };
    init_list(spec.image_branch, true);
    init_list(spec.layers, false);
    return params;
}

namespace {

Tensor run_layers(const std::vector<LayerSpec>& layers, bool image_branch, const ModelParams& params,
                  Tensor x, const Tensor* branch, std::size_t stop_at) {
    for (std::size_t i = 0; i < std::min(stop_at, layers.size()); ++i) {
        const auto& l = layers[i];
        switch (l.kind) {
            case LayerKind::Conv: {
                const std::string prefix = param_prefix(image_branch, i);
                ConvParams p{params.get(prefix + ".weight"), params.get(prefix + ".bias"), l.stride,
                             l.dilation, l.padding};
                x = conv2d(x, p);
                break;
            }
            case LayerKind::Relu: x = relu(x); break;
            case LayerKind::MaxPool2: x = maxpool2(x); break;
            case LayerKind::Sigmoid: x = sigmoid(x); break;
            case LayerKind::ChannelSoftmax: x = channel_softmax(x); break;
            case LayerKind::SliceChannel: x = slice_channels(x, l.out_channels, l.out_channels + 1); break;
            case LayerKind::ConcatBranches: {
                const Tensor parts[2] = {x, *branch};
                x = concat_channels(parts);
                break;
            }
        }
    }
    return x;
}

}  // namespace

Tensor forward(const NetSpec& spec, const ModelParams& params, const Tensor& input,
               const Tensor& image, ForwardOptions opts) {
    if (input.rank() != 4 || input.dim(1) != spec.input_channels) {
        throw std::invalid_argument("forward: input " + shape_to_string(input.shape()) +
                                    " does not match network input channels " +
                                    std::to_string(spec.input_channels));
    }
    std::size_t stop = spec.layers.size();
    if (opts.logits) {
        for (std::size_t i = spec.layers.size(); i-- > 0;) {
            if (spec.layers[i].kind == LayerKind::Conv) {
                stop = i + 1;
                break;
            }
        }
    }
    Tensor branch;
    if (spec.two_branch()) {
        if (!image.defined()) throw std::invalid_argument("forward: two-branch network needs an image");
        if (image.rank() != 4 || image.dim(1) != spec.image_channels || image.dim(0) != input.dim(0)) {
            throw std::invalid_argument("forward: image " + shape_to_string(image.shape()) +
                                        " does not match image branch");
        }
        branch = run_layers(spec.image_branch, true, params, image, nullptr, spec.image_branch.size());
    }
    return run_layers(spec.layers, false, params, input, &branch, stop);
}

// ---- persistence -------------------------------------------------------------

std::string_view layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::Conv: return "conv";
        case LayerKind::Relu: return "relu";
        case LayerKind::MaxPool2: return "maxpool2";
        case LayerKind::ChannelSoftmax: return "channel_softmax";
        case LayerKind::Sigmoid: return "sigmoid";
        case LayerKind::SliceChannel: return "slice_channel";
        case LayerKind::ConcatBranches: return "concat_branches";
    }
    return "?";
}

namespace {

LayerKind parse_layer_kind(std::string_view s) {
    for (auto k : {LayerKind::Conv, LayerKind::Relu, LayerKind::MaxPool2, LayerKind::ChannelSoftmax,
                   LayerKind::Sigmoid, LayerKind::SliceChannel, LayerKind::ConcatBranches}) {
        if (layer_kind_name(k) == s) return k;
    }
    throw std::runtime_error("netspec: unknown layer kind '" + std::string(s) + "'");
}

void write_layer(std::ostream& out, std::string_view key, const LayerSpec& l) {
    out << key << " = " << layer_kind_name(l.kind);
    if (l.kind == LayerKind::Conv) {
        out << " in=" << l.in_channels << " out=" << l.out_channels << " kernel=" << l.kernel
            << " stride=" << l.stride << " dilation=" << l.dilation << " padding=" << l.padding;
    } else if (l.kind == LayerKind::SliceChannel) {
        out << " index=" << l.out_channels;
    }
    out << '\n';
}

LayerSpec parse_layer(const std::string& text) {
    std::istringstream in(text);
    std::string kind;
    in >> kind;
    LayerSpec l{parse_layer_kind(kind)};
    std::string field;
    while (in >> field) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) throw std::runtime_error("netspec: bad field '" + field + "'");
        const std::string key = field.substr(0, eq);
        const std::size_t v = std::stoul(field.substr(eq + 1));
        if (key == "in") l.in_channels = v;
        else if (key == "out" || key == "index") l.out_channels = v;
        else if (key == "kernel") l.kernel = v;
        else if (key == "stride") l.stride = v;
        else if (key == "dilation") l.dilation = v;
        else if (key == "padding") l.padding = v;
        else throw std::runtime_error("netspec: unknown field '" + key + "'");
    }
    return l;
}

void put_le(std::ostream& out, std::uint64_t v, int bytes) {
    for (int k = 0; k < bytes; ++k) out.put(static_cast<char>((v >> (8 * k)) & 0xff));
}

std::uint64_t get_le(std::istream& in, int bytes) {
    std::uint64_t v = 0;
    for (int k = 0; k < bytes; ++k) {
        const int c = in.get();
        if (c == EOF) throw std::runtime_error("checkpoint: truncated");
        v |= static_cast<std::uint64_t>(c) << (8 * k);
    }
    return v;
}

}  // namespace

void write_netspec(std::ostream& out, const NetSpec& spec) {
    out << "role = " << (spec.role == NetRole::Segmenter ? "segmenter" : "adversary") << '\n';
    out << "input_channels = " << spec.input_channels << '\n';
    out << "image_channels = " << spec.image_channels << '\n';
    out << "stride = " << spec.stride << '\n';
    for (const auto& l : spec.image_branch) write_layer(out, "image_layer", l);
    for (const auto& l : spec.layers) write_layer(out, "layer", l);
}

NetSpec read_netspec(std::istream& in) {
    NetSpec spec;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("netspec: bad line '" + line + "'");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "role") {
            if (value == "segmenter") spec.role = NetRole::Segmenter;
            else if (value == "adversary") spec.role = NetRole::Adversary;
            else throw std::runtime_error("netspec: unknown role '" + value + "'");
        } else if (key == "input_channels") {
            spec.input_channels = std::stoul(value);
        } else if (key == "image_channels") {
            spec.image_channels = std::stoul(value);
        } else if (key == "stride") {
            spec.stride = std::stoul(value);
        } else if (key == "layer") {
            spec.layers.push_back(parse_layer(value));
        } else if (key == "image_layer") {
            spec.image_branch.push_back(parse_layer(value));
        } else {
            throw std::runtime_error("netspec: unknown key '" + key + "'");
        }
    }
    spec.validate();
    return spec;
}

void save_netspec(const std::filesystem::path& path, const NetSpec& spec) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    write_netspec(out, spec);
}

NetSpec load_netspec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return read_netspec(in);
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
    std::vector<std::string> blobs;
    for (const auto& [name, t] : params) {
        std::ostringstream b(std::ios::binary);
        write_tensor(b, t);
        blobs.push_back(std::move(b).str());
    }
    std::uint64_t offset = 4 + 1 + 4;
    for (const auto& [name, t] : params) offset += 4 + name.size() + 8;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write("ADVC", 4);
    out.put(1);
    put_le(out, params.size(), 4);
    std::size_t i = 0;
    for (const auto& [name, t] : params) {
        put_le(out, name.size(), 4);
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_le(out, offset, 8);
        offset += blobs[i++].size();
    }
    for (const auto& b : blobs) out.write(b.data(), static_cast<std::streamsize>(b.size()));
    if (!out) throw std::runtime_error("error writing " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "ADVC", 4) != 0 || in.get() != 1) {
        throw std::runtime_error("checkpoint: bad header in " + path.string());
    }
    const auto count = get_le(in, 4);
    std::vector<std::pair<std::string, std::uint64_t>> index;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = get_le(in, 4);
        if (len > 4096) throw std::runtime_error("checkpoint: bad name length");
        std::string name(len, '\0');
        if (!in.read(name.data(), static_cast<std::streamsize>(len))) {
            throw std::runtime_error("checkpoint: truncated");
        }
        index.emplace_back(std::move(name), get_le(in, 8));
    }
    ModelParams params;
    for (const auto& [name, off] : index) {
        in.seekg(static_cast<std::streamoff>(off));
        params.add(name, read_tensor(in).clone(true));
    }
    return params;
}

}  // namespace advseg
