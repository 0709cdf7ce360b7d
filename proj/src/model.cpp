#include "a4unet/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace a4 {

std::vector<SwinBranchConfig> ModelConfig::effective_branches() const {
    if (!branches.empty()) return branches;
    const int64_t g = grid();
    std::vector<int64_t> windows{1, 2, g / 2, g};
    std::vector<SwinBranchConfig> out;
    for (int64_t w : windows) {
        if (w < 1 || g % w != 0) continue;
        if (!out.empty() && out.back().window == w) continue;
        SwinBranchConfig c;
        c.window = w;
        out.push_back(c);
    }
    return out;
}

std::string ModelConfig::ablation_label() const {
    const bool d = ablation.use_dlka, s = ablation.use_sspp, c = ablation.use_cam;
    if (!d && !s && !c) return "ResUnet (baseline)";
    if (d && s && c) return "A4-Unet";
    std::string label = "ResUnet";
    if (d) label += " + DLKA";
    if (s) label += " + SSPP";
    if (c) label += " + CAM";
    return label;
}

void ModelConfig::validate() const {
    if (encoder_channels.empty()) throw ConfigError("encoder_channels must not be empty");
    if (input_size <= 0 || input_size % downsample_factor() != 0)
        throw ConfigError("input_size " + std::to_string(input_size) + " must be divisible by " +
                          std::to_string(downsample_factor()));
    if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (attention_reduction < 1) throw ConfigError("attention_reduction must be >= 1");
    for (int64_t c : encoder_channels)
        if (c < 2) throw ConfigError("encoder channel widths must be >= 2");
    if (!lk_geometry.empty() && lk_geometry.size() != 1 && lk_geometry.size() != encoder_channels.size())
        throw ConfigError("lk_geometry must hold 1 entry or one per stage");
    for (const auto& g : lk_geometry) lk_kernel_sizes(g.kernel, g.dilation);  // range checks
    const int64_t gr = grid();
    if (gr < 1) throw ConfigError("input_size too small for " + std::to_string(stages()) + " stages");
    for (const auto& b : effective_branches()) {
        if (b.window < 1 || gr % b.window != 0)
            throw ConfigError("branch window " + std::to_string(b.window) + " does not divide the bottleneck grid " +
                              std::to_string(gr));
        if (b.embed_dim % b.heads != 0)
            throw ConfigError("branch embed_dim " + std::to_string(b.embed_dim) + " not divisible by heads " +
                              std::to_string(b.heads));
        if (b.depth < 1) throw ConfigError("branch depth must be >= 1");
    }
}

void to_json(Json& j, const LkGeometry& g) { j = Json{{"kernel", g.kernel}, {"dilation", g.dilation}}; }
void from_json(const Json& j, LkGeometry& g) {
    g.kernel = j.value("kernel", int64_t{21});
    g.dilation = j.value("dilation", int64_t{3});
}

void to_json(Json& j, const SwinBranchConfig& c) {
    j = Json{{"window", c.window}, {"heads", c.heads}, {"depth", c.depth}, {"embed_dim", c.embed_dim}};
}
void from_json(const Json& j, SwinBranchConfig& c) {
    c.window = j.value("window", int64_t{7});
    c.heads = j.value("heads", int64_t{4});
    c.depth = j.value("depth", int64_t{2});
    c.embed_dim = j.value("embed_dim", int64_t{96});
}

void to_json(Json& j, const AblationSwitches& a) {
    j = Json{{"use_dlka", a.use_dlka}, {"use_sspp", a.use_sspp}, {"use_cam", a.use_cam}};
}
void from_json(const Json& j, AblationSwitches& a) {
    a.use_dlka = j.value("use_dlka", true);
    a.use_sspp = j.value("use_sspp", true);
    a.use_cam = j.value("use_cam", true);
}

void to_json(Json& j, const ModelConfig& c) {
    j = Json{{"input_size", c.input_size},
             {"in_channels", c.in_channels},
             {"num_classes", c.num_classes},
             {"encoder_channels", c.encoder_channels},
             {"lk_geometry", c.lk_geometry},
             {"branches", c.branches},
             {"attention_reduction", c.attention_reduction},
             {"attention_gates", c.attention_gates},
             {"ablation", c.ablation},
             {"seed", c.seed}};
}
void from_json(const Json& j, ModelConfig& c) {
    c.input_size = j.value("input_size", int64_t{224});
    c.in_channels = j.value("in_channels", int64_t{4});
    c.num_classes = j.value("num_classes", int64_t{2});
    c.encoder_channels = j.value("encoder_channels", std::vector<int64_t>{64, 128, 256, 512});
    c.lk_geometry = j.value("lk_geometry", std::vector<LkGeometry>{{21, 3}});
    c.branches = j.value("branches", std::vector<SwinBranchConfig>{});
    c.attention_reduction = j.value("attention_reduction", int64_t{4});
    c.attention_gates = j.value("attention_gates", true);
    c.ablation = j.value("ablation", AblationSwitches{});
    c.seed = j.value("seed", uint64_t{1234});
}

Tensor softmax_over_channel(const Tensor& logits) {
    const int64_t n = logits.size(0), c = logits.size(1), hw = logits.size(2) * logits.size(3);
    Tensor out(logits.shape());
    for (int64_t b = 0; b < n; ++b) {
        const double* lp = logits.data() + b * c * hw;
        double* op = out.data() + b * c * hw;
        for (int64_t p = 0; p < hw; ++p) {
            double m = lp[p];
            for (int64_t ch = 1; ch < c; ++ch) m = std::max(m, lp[ch * hw + p]);
            double s = 0.0;
            for (int64_t ch = 0; ch < c; ++ch) s += std::exp(lp[ch * hw + p] - m);
            const double inv = 1.0 / s;
            for (int64_t ch = 0; ch < c; ++ch) op[ch * hw + p] = std::exp(lp[ch * hw + p] - m) * inv;
        }
    }
    return out;
}

std::vector<int64_t> argmax_over_channel(const Tensor& logits) {
    const int64_t n = logits.size(0), c = logits.size(1), hw = logits.size(2) * logits.size(3);
    std::vector<int64_t> out(static_cast<size_t>(n * hw));
    for (int64_t b = 0; b < n; ++b) {
        const double* lp = logits.data() + b * c * hw;
        for (int64_t p = 0; p < hw; ++p) {
            double best = lp[p];
            int64_t bi = 0;
            for (int64_t ch = 1; ch < c; ++ch)
                if (lp[ch * hw + p] > best) {
                    best = lp[ch * hw + p];
                    bi = ch;
                }
            out[static_cast<size_t>(b * hw + p)] = bi;
        }
    }
    return out;
}

A4Unet::A4Unet(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    nn::Rng rng(cfg_.seed);
    const int64_t top = cfg_.encoder_channels.back();
    encoder_ = Encoder(cfg_.in_channels, cfg_.encoder_channels, cfg_.lk_geometry, cfg_.ablation.use_dlka, rng);
    bottleneck_ = SsppBottleneck(top, cfg_.grid(), cfg_.grid(), cfg_.effective_branches(), cfg_.attention_reduction,
                                 cfg_.ablation.use_sspp, rng);
    decoder_ = Decoder(cfg_.encoder_channels, top, cfg_.grid(), cfg_.grid(), cfg_.num_classes,
                       cfg_.attention_reduction, cfg_.ablation.use_cam,
                       cfg_.ablation.use_cam && cfg_.attention_gates, rng);
}

Variable A4Unet::forward_logits(const Variable& x, bool training) {
    if (x.value().size(1) != cfg_.in_channels)
        throw ShapeError("model expects " + std::to_string(cfg_.in_channels) + " input channels, got " +
                         std::to_string(x.value().size(1)));
    EncoderOutput enc = encoder_.forward(x, training);
    Variable mid = bottleneck_.forward(enc.bottleneck_in, training);
    return decoder_.forward(enc.pyramid, mid, training);
}

ModelOutput A4Unet::forward(const Tensor& batch, bool training) {
    ModelOutput out;
    out.logits = forward_logits(Variable::constant(batch), training);
    out.probabilities = softmax_over_channel(out.logits.value());
    return out;
}

Tensor A4Unet::infer(const Tensor& batch) {
    NoGradGuard ng;
    return forward_logits(Variable::constant(batch), /*training=*/false).value();
}

void A4Unet::visit(nn::ModuleVisitor& v) {
    encoder_.visit("encoder", v);
    bottleneck_.visit("bottleneck", v);
    decoder_.visit("decoder", v);
}

int64_t A4Unet::parameter_count() {
    nn::ParamCollector pc;
    visit(pc);
    int64_t total = 0;
    for (auto& [name, p] : pc.params) total += p->value().numel();
    return total;
}

Json A4Unet::describe() {
    nn::ParamCollector pc;
    visit(pc);
    auto count_prefix = [&](const std::string& prefix) {
        int64_t n = 0;
        for (auto& [name, p] : pc.params)
            if (name.rfind(prefix, 0) == 0) n += p->value().numel();
        return n;
    };

    Json stages = Json::array();
    const int64_t s_count = cfg_.stages();
    int64_t res = cfg_.input_size;
    for (int64_t s = 0; s < s_count; ++s) {
        res /= 2;
        stages.push_back(Json{{"name", "encoder.stage" + std::to_string(s + 1)},
                              {"parameters", count_prefix("encoder.stage" + std::to_string(s + 1) + ".")},
                              {"output_shape", Json::array({cfg_.encoder_channels[static_cast<size_t>(s)], res, res})}});
    }
    stages.push_back(Json{{"name", "bottleneck"},
                          {"parameters", count_prefix("bottleneck.")},
                          {"output_shape", Json::array({cfg_.encoder_channels.back(), cfg_.grid(), cfg_.grid()})}});
    int64_t dec_res = cfg_.grid();
    int64_t dec_ch = cfg_.encoder_channels.back();
    for (int64_t s = 0; s < s_count; ++s) {
        dec_res *= 2;
        dec_ch = std::max<int64_t>(cfg_.encoder_channels[static_cast<size_t>(s_count - 1 - s)] / 2, 1);
        stages.push_back(Json{{"name", "decoder.stage" + std::to_string(s + 1)},
                              {"parameters", count_prefix("decoder.stage" + std::to_string(s + 1) + ".")},
                              {"output_shape", Json::array({dec_ch, dec_res, dec_res})}});
    }

    Json branches = Json::array();
    if (cfg_.ablation.use_sspp) {
        const auto bs = cfg_.effective_branches();
        for (size_t i = 0; i < bs.size(); ++i)
            branches.push_back(Json{{"name", "bottleneck.branch" + std::to_string(i + 1)},
                                    {"window", bs[i].window},
                                    {"heads", bs[i].heads},
                                    {"depth", bs[i].depth},
                                    {"embed_dim", bs[i].embed_dim},
                                    {"parameters", count_prefix("bottleneck.branch" + std::to_string(i + 1) + ".")}});
    }

    int64_t total = 0;
    for (auto& [name, p] : pc.params) total += p->value().numel();

    return Json{{"model", cfg_.ablation_label()},
                {"config", cfg_},
                {"stages", stages},
                {"bottleneck_branches", branches},
                {"head", Json{{"name", "decoder.head"},
                              {"parameters", count_prefix("decoder.head.")},
                              {"output_shape", Json::array({cfg_.num_classes, cfg_.input_size, cfg_.input_size})}}},
                {"total_parameters", total}};
}

std::string A4Unet::describe_text() {
    Json d = describe();
    std::ostringstream os;
    os << d["model"].get<std::string>() << "\n";
    os << "input: [" << cfg_.in_channels << " x " << cfg_.input_size << " x " << cfg_.input_size << "]\n";
    for (const auto& s : d["stages"]) {
        const auto& shape = s["output_shape"];
        os << "  " << s["name"].get<std::string>() << "  params " << s["parameters"].get<int64_t>() << "  out ["
           << shape[0].get<int64_t>() << " x " << shape[1].get<int64_t>() << " x " << shape[2].get<int64_t>()
           << "]\n";
    }
    for (const auto& b : d["bottleneck_branches"])
        os << "  " << b["name"].get<std::string>() << "  window " << b["window"].get<int64_t>() << "  params "
           << b["parameters"].get<int64_t>() << "\n";
    os << "  decoder.head  params " << d["head"]["parameters"].get<int64_t>() << "\n";
    os << "total parameters: " << d["total_parameters"].get<int64_t>() << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'A', '4', 'U', 'N', 'E', 'T', 'C', 'K'};
constexpr uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("checkpoint truncated");
    return v;
}
}  // namespace

void write_checkpoint(const std::string& path, const CheckpointData& data) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw DataError("cannot open " + tmp + " for writing");
        os.write(kMagic, sizeof(kMagic));
        write_pod(os, kVersion);
        const std::string header = data.header.dump();
        write_pod(os, static_cast<uint64_t>(header.size()));
        os.write(header.data(), static_cast<std::streamsize>(header.size()));
        write_pod(os, static_cast<uint64_t>(data.tensors.size()));
        for (const auto& [name, t] : data.tensors) {
            write_pod(os, static_cast<uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_pod(os, static_cast<uint32_t>(t.rank()));
            for (int64_t d : t.shape()) write_pod(os, d);
            os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * 8));
        }
        if (!os) throw DataError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) throw DataError(path + " is not an A4-Unet checkpoint");
    const uint32_t version = read_pod<uint32_t>(is);
    if (version != kVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
    const uint64_t hlen = read_pod<uint64_t>(is);
    std::string header(hlen, '\0');
    is.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw DataError("checkpoint truncated");
    CheckpointData data;
    data.header = Json::parse(header, nullptr, false);
    if (data.header.is_discarded()) throw DataError("checkpoint header is not valid JSON");
    const uint64_t count = read_pod<uint64_t>(is);
    for (uint64_t i = 0; i < count; ++i) {
        const uint32_t nlen = read_pod<uint32_t>(is);
        std::string name(nlen, '\0');
        is.read(name.data(), nlen);
        const uint32_t rank = read_pod<uint32_t>(is);
        std::vector<int64_t> shape(rank);
        for (auto& d : shape) d = read_pod<int64_t>(is);
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * 8));
        if (!is) throw DataError("checkpoint truncated while reading " + name);
        data.tensors.emplace_back(std::move(name), std::move(t));
    }
    return data;
}

void collect_model_tensors(A4Unet& model, std::vector<std::pair<std::string, Tensor>>& out) {
    nn::ParamCollector pc;
    model.visit(pc);
    for (auto& [name, p] : pc.params) out.emplace_back("param/" + name, p->value());
    for (auto& [name, b] : pc.buffers) out.emplace_back("buffer/" + name, *b);
}

std::vector<std::string> json_diff(const Json& a, const Json& b, const std::string& prefix) {
    std::vector<std::string> out;
    if (a.is_object() && b.is_object()) {
        for (auto it = a.begin(); it != a.end(); ++it) {
            const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
            if (!b.contains(it.key())) {
                out.push_back(key + ": " + it.value().dump() + " vs <missing>");
            } else {
                auto sub = json_diff(it.value(), b.at(it.key()), key);
                out.insert(out.end(), sub.begin(), sub.end());
            }
        }
        for (auto it = b.begin(); it != b.end(); ++it)
            if (!a.contains(it.key()))
                out.push_back((prefix.empty() ? it.key() : prefix + "." + it.key()) + ": <missing> vs " +
                              it.value().dump());
    } else if (a != b) {
        out.push_back(prefix + ": " + a.dump() + " vs " + b.dump());
    }
    return out;
}

void load_model_tensors(A4Unet& model, const CheckpointData& data) {
    if (!data.header.contains("model_config")) throw DataError("checkpoint header lacks model_config");
    Json current;
    to_json(current, model.config());
    const auto diffs = json_diff(data.header.at("model_config"), current);
    if (!diffs.empty()) {
        std::string msg = "checkpoint/model config mismatch:";
        for (const auto& d : diffs) msg += "\n  " + d;
        throw DataError(msg);
    }
    nn::ParamCollector pc;
    model.visit(pc);
    std::unordered_map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : data.tensors) by_name[name] = &t;
    auto restore = [&](const std::string& key, Tensor& dst) {
        auto it = by_name.find(key);
        if (it == by_name.end()) throw DataError("checkpoint missing tensor " + key);
        if (it->second->shape() != dst.shape())
            throw DataError("checkpoint tensor " + key + " has shape " + it->second->shape_str() + ", expected " +
                            dst.shape_str());
        dst = *it->second;
    };
    for (auto& [name, p] : pc.params) restore("param/" + name, p->value_mut());
    for (auto& [name, b] : pc.buffers) restore("buffer/" + name, *b);
}

}  // namespace a4
