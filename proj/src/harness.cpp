#include "zsq/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "zsq/errors.hpp"
#include "zsq/ops.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace zsq::harness {

namespace {

// ---- strict JSON helpers ---------------------------------------------------

void expect_object(const json& j, const char* where, std::initializer_list<const char*> keys) {
    if (!j.is_object()) throw ConfigError(std::string(where) + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : keys)
            if (it.key() == k) {
                known = true;
                break;
            }
        if (!known)
            throw ConfigError(std::string(where) + ": unknown key '" + it.key() + "'");
    }
}

template <class T>
void read_field(const json& j, const char* where, const char* key, T& out) {
    auto it = j.find(key);
    if (it == j.end()) return;  // absent keys keep the default
    try {
        out = it->get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string(where) + "." + key + ": wrong value type");
    }
}

std::string read_enum(const json& j, const char* where, const char* key,
                      const std::string& fallback) {
    std::string s = fallback;
    read_field(j, where, key, s);
    return s;
}

// ---- enum <-> string -------------------------------------------------------

std::string mode_str(synthesis::ObjectiveMode m) {
    return m == synthesis::ObjectiveMode::FNL ? "fnl" : "hfnl";
}
synthesis::ObjectiveMode mode_parse(const std::string& s) {
    if (s == "fnl") return synthesis::ObjectiveMode::FNL;
    if (s == "hfnl") return synthesis::ObjectiveMode::HFNL;
    throw ConfigError("synthesis.mode: expected 'fnl' or 'hfnl', got '" + s + "'");
}

std::string objective_str(finetune::FinetuneConfig::Objective o) {
    return o == finetune::FinetuneConfig::Objective::HAST ? "hast" : "baseline_ce_kl";
}
finetune::FinetuneConfig::Objective objective_parse(const std::string& s) {
    if (s == "hast") return finetune::FinetuneConfig::Objective::HAST;
    if (s == "baseline_ce_kl") return finetune::FinetuneConfig::Objective::BaselineCeKl;
    throw ConfigError("finetune.objective: expected 'hast' or 'baseline_ce_kl', got '" + s + "'");
}

std::string direction_str(promotion::PromotionConfig::Direction d) {
    switch (d) {
        case promotion::PromotionConfig::Direction::KL: return "kl";
        case promotion::PromotionConfig::Direction::FA: return "fa";
        default: return "kl_fa";
    }
}
promotion::PromotionConfig::Direction direction_parse(const std::string& s) {
    if (s == "kl") return promotion::PromotionConfig::Direction::KL;
    if (s == "fa") return promotion::PromotionConfig::Direction::FA;
    if (s == "kl_fa") return promotion::PromotionConfig::Direction::KLplusFA;
    throw ConfigError("promotion.direction: expected 'kl', 'fa' or 'kl_fa', got '" + s + "'");
}

std::string align_mode_str(alignment::AlignmentConfig::Mode m) {
    return m == alignment::AlignmentConfig::Mode::Relaxed ? "relaxed" : "direct";
}
alignment::AlignmentConfig::Mode align_mode_parse(const std::string& s) {
    if (s == "relaxed") return alignment::AlignmentConfig::Mode::Relaxed;
    if (s == "direct") return alignment::AlignmentConfig::Mode::Direct;
    throw ConfigError("alignment.mode: expected 'relaxed' or 'direct', got '" + s + "'");
}

// ---- per-section (de)serialization -----------------------------------------

json dataset_to_json(const DatasetConfig& c) {
    return {{"seed", c.seed},
            {"classes", c.classes},
            {"per_class_train", c.per_class_train},
            {"per_class_test", c.per_class_test}};
}

DatasetConfig dataset_from_json(const json& j) {
    expect_object(j, "dataset", {"seed", "classes", "per_class_train", "per_class_test"});
    DatasetConfig c;
    read_field(j, "dataset", "seed", c.seed);
    read_field(j, "dataset", "classes", c.classes);
    read_field(j, "dataset", "per_class_train", c.per_class_train);
    read_field(j, "dataset", "per_class_test", c.per_class_test);
    return c;
}

json schedule_to_json(const models::TeacherSchedule& s) {
    return {{"epochs", s.epochs},      {"lr", s.lr},       {"momentum", s.momentum},
            {"weight_decay", s.weight_decay}, {"batch", s.batch}, {"seed", s.seed}};
}

models::TeacherSchedule schedule_from_json(const json& j) {
    expect_object(j, "teacher.schedule",
                  {"epochs", "lr", "momentum", "weight_decay", "batch", "seed"});
    models::TeacherSchedule s;
    read_field(j, "teacher.schedule", "epochs", s.epochs);
    read_field(j, "teacher.schedule", "lr", s.lr);
    read_field(j, "teacher.schedule", "momentum", s.momentum);
    read_field(j, "teacher.schedule", "weight_decay", s.weight_decay);
    read_field(j, "teacher.schedule", "batch", s.batch);
    read_field(j, "teacher.schedule", "seed", s.seed);
    return s;
}

json teacher_to_json(const TeacherConfig& c) {
    return {{"arch", c.arch},
            {"width", c.width},
            {"init_seed", c.init_seed},
            {"schedule", schedule_to_json(c.schedule)}};
}

TeacherConfig teacher_from_json(const json& j) {
    expect_object(j, "teacher", {"arch", "width", "init_seed", "schedule"});
    TeacherConfig c;
    read_field(j, "teacher", "arch", c.arch);
    read_field(j, "teacher", "width", c.width);
    read_field(j, "teacher", "init_seed", c.init_seed);
    if (j.contains("schedule")) c.schedule = schedule_from_json(j.at("schedule"));
    return c;
}

json synthesis_to_json(const synthesis::SynthesisConfig& c) {
    return {{"total", c.total},
            {"batch", c.batch},
            {"iters", c.iters},
            {"lr0", c.lr0},
            {"plateau_window", c.plateau_window},
            {"lr_decay", c.lr_decay},
            {"beta", c.beta},
            {"gamma", c.gamma},
            {"classes", c.classes},
            {"seed", c.seed},
            {"clip_inputs", c.clip_inputs},
            {"mode", mode_str(c.mode)},
            {"differentiate_weight", c.differentiate_weight}};
}

synthesis::SynthesisConfig synthesis_from_json(const json& j) {
    expect_object(j, "synthesis",
                  {"total", "batch", "iters", "lr0", "plateau_window", "lr_decay", "beta",
                   "gamma", "classes", "seed", "clip_inputs", "mode", "differentiate_weight"});
    synthesis::SynthesisConfig c;
    read_field(j, "synthesis", "total", c.total);
    read_field(j, "synthesis", "batch", c.batch);
    read_field(j, "synthesis", "iters", c.iters);
    read_field(j, "synthesis", "lr0", c.lr0);
    read_field(j, "synthesis", "plateau_window", c.plateau_window);
    read_field(j, "synthesis", "lr_decay", c.lr_decay);
    read_field(j, "synthesis", "beta", c.beta);
    read_field(j, "synthesis", "gamma", c.gamma);
    read_field(j, "synthesis", "classes", c.classes);
    read_field(j, "synthesis", "seed", c.seed);
    read_field(j, "synthesis", "clip_inputs", c.clip_inputs);
    c.mode = mode_parse(read_enum(j, "synthesis", "mode", mode_str(c.mode)));
    read_field(j, "synthesis", "differentiate_weight", c.differentiate_weight);
    return c;
}

json promotion_to_json(const promotion::PromotionConfig& c) {
    return {{"enabled", c.enabled},
            {"epsilon", c.epsilon},
            {"direction", direction_str(c.direction)},
            {"weight_original", c.weight_original},
            {"weight_promoted", c.weight_promoted}};
}

promotion::PromotionConfig promotion_from_json(const json& j) {
    expect_object(j, "promotion",
                  {"enabled", "epsilon", "direction", "weight_original", "weight_promoted"});
    promotion::PromotionConfig c;
    read_field(j, "promotion", "enabled", c.enabled);
    read_field(j, "promotion", "epsilon", c.epsilon);
    c.direction = direction_parse(read_enum(j, "promotion", "direction", direction_str(c.direction)));
    read_field(j, "promotion", "weight_original", c.weight_original);
    read_field(j, "promotion", "weight_promoted", c.weight_promoted);
    return c;
}

json alignment_to_json(const alignment::AlignmentConfig& c) {
    return {{"lambda", c.lambda},
            {"alpha", c.alpha},
            {"mode", align_mode_str(c.mode)},
            {"normalize_attention", c.normalize_attention}};
}

alignment::AlignmentConfig alignment_from_json(const json& j) {
    expect_object(j, "alignment", {"lambda", "alpha", "mode", "normalize_attention"});
    alignment::AlignmentConfig c;
    read_field(j, "alignment", "lambda", c.lambda);
    read_field(j, "alignment", "alpha", c.alpha);
    c.mode = align_mode_parse(read_enum(j, "alignment", "mode", align_mode_str(c.mode)));
    read_field(j, "alignment", "normalize_attention", c.normalize_attention);
    return c;
}

json finetune_to_json(const finetune::FinetuneConfig& c) {
    return {{"epochs", c.epochs},
            {"lr0", c.lr0},
            {"lr_step", c.lr_step},
            {"lr_decay", c.lr_decay},
            {"momentum", c.momentum},
            {"nesterov", c.nesterov},
            {"weight_decay", c.weight_decay},
            {"batch", c.batch},
            {"objective", objective_str(c.objective)},
            {"alpha", c.alpha},
            {"promotion", promotion_to_json(c.promotion)},
            {"alignment", alignment_to_json(c.alignment)},
            {"seed", c.seed},
            {"augment", c.augment},
            {"grad_cosine_every", c.grad_cosine_every}};
}

finetune::FinetuneConfig finetune_from_json(const json& j) {
    expect_object(j, "finetune",
                  {"epochs", "lr0", "lr_step", "lr_decay", "momentum", "nesterov",
                   "weight_decay", "batch", "objective", "alpha", "promotion", "alignment",
                   "seed", "augment", "grad_cosine_every"});
    finetune::FinetuneConfig c;
    read_field(j, "finetune", "epochs", c.epochs);
    read_field(j, "finetune", "lr0", c.lr0);
    read_field(j, "finetune", "lr_step", c.lr_step);
    read_field(j, "finetune", "lr_decay", c.lr_decay);
    read_field(j, "finetune", "momentum", c.momentum);
    read_field(j, "finetune", "nesterov", c.nesterov);
    read_field(j, "finetune", "weight_decay", c.weight_decay);
    read_field(j, "finetune", "batch", c.batch);
    c.objective = objective_parse(read_enum(j, "finetune", "objective", objective_str(c.objective)));
    read_field(j, "finetune", "alpha", c.alpha);
    if (j.contains("promotion")) c.promotion = promotion_from_json(j.at("promotion"));
    if (j.contains("alignment")) c.alignment = alignment_from_json(j.at("alignment"));
    read_field(j, "finetune", "seed", c.seed);
    read_field(j, "finetune", "augment", c.augment);
    read_field(j, "finetune", "grad_cosine_every", c.grad_cosine_every);
    return c;
}

// ---- binary container plumbing ---------------------------------------------

constexpr char kMagic[8] = {'Z', 'S', 'Q', 'F', 'O', 'R', 'G', 'E'};
constexpr std::uint32_t kCkptVersion = 1;

void put_u32(std::string& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& b, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(b, bits);
}

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw ConfigError("checkpoint: file truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    float f32() {
        std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
};

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ConfigError("write failed for '" + path + "'");
}

json qp_to_json(const quant::QuantParams& p) {
    return {{"bits", p.bits}, {"lo", p.lo}, {"hi", p.hi}, {"scale", p.scale}, {"zero", p.zero}};
}

quant::QuantParams qp_from_json(const json& j) {
    expect_object(j, "checkpoint.qp", {"bits", "lo", "hi", "scale", "zero"});
    quant::QuantParams p;
    read_field(j, "checkpoint.qp", "bits", p.bits);
    read_field(j, "checkpoint.qp", "lo", p.lo);
    read_field(j, "checkpoint.qp", "hi", p.hi);
    read_field(j, "checkpoint.qp", "scale", p.scale);
    read_field(j, "checkpoint.qp", "zero", p.zero);
    return p;
}

json tensor_index(nn::Graph& g) {
    json tensors = json::array();
    for (nn::Param* p : g.params())
        tensors.push_back({{"name", p->name}, {"shape", p->value.shape()}});
    return tensors;
}

std::string pack_checkpoint(nn::Graph& g, json header) {
    header["tensors"] = tensor_index(g);
    const std::string hdr = header.dump();
    std::string out(kMagic, 8);
    put_u32(out, kCkptVersion);
    put_u64(out, hdr.size());
    out += hdr;
    // saving canonicalizes the live parameters to their stored 32-bit values
    // so that a save/load round-trip reproduces the forward pass exactly
    for (nn::Param* p : g.params())
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const float f = static_cast<float>(p->value[i]);
            p->value[i] = static_cast<double>(f);
            put_f32(out, f);
        }
    return out;
}

// Validates magic/version/length and fills the rebuilt graph's parameters.
json unpack_checkpoint(const std::string& path, const std::string& expected_kind,
                       nn::Graph& out_graph, CheckpointMeta* meta) {
    const std::string bytes = read_file(path);
    ByteReader r{bytes};
    r.need(8);
    if (std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw ConfigError("checkpoint: bad magic in '" + path + "'");
    r.pos = 8;
    const std::uint32_t version = r.u32();
    if (version != kCkptVersion)
        throw ConfigError("checkpoint: unsupported format version " + std::to_string(version));
    const std::uint64_t hdr_len = r.u64();
    r.need(hdr_len);
    json header;
    try {
        header = json::parse(bytes.substr(r.pos, hdr_len));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("checkpoint: corrupt header: ") + e.what());
    }
    r.pos += hdr_len;

    const std::string kind = header.value("kind", "");
    if (kind != expected_kind)
        throw ConfigError("checkpoint: kind '" + kind + "', expected '" + expected_kind + "'");

    CheckpointMeta m;
    m.arch = header.value("arch", "");
    m.classes = header.value("classes", 0);
    m.width = header.value("width", std::size_t{0});
    if (meta) *meta = m;

    out_graph = models::build_model(m.arch, m.classes, m.width);
    auto params = out_graph.params();
    const auto& tensors = header.at("tensors");
    if (!tensors.is_array() || tensors.size() != params.size())
        throw ConfigError("checkpoint: tensor count mismatch");

    std::uint64_t total = 0;
    for (const auto& t : tensors) total += [&] {
        std::uint64_t n = 1;
        for (const auto& d : t.at("shape")) n *= d.get<std::uint64_t>();
        return n;
    }();
    if (bytes.size() != r.pos + total * 4)
        throw ConfigError("checkpoint: payload length mismatch (corrupt or truncated)");

    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& t = tensors[i];
        if (t.at("name").get<std::string>() != params[i]->name)
            throw ConfigError("checkpoint: tensor name mismatch at '" + params[i]->name + "'");
        const auto shape = t.at("shape").get<std::vector<std::size_t>>();
        if (shape != params[i]->value.shape())
            throw ConfigError("checkpoint: shape mismatch for '" + params[i]->name + "'");
        for (std::size_t k = 0; k < params[i]->value.size(); ++k)
            params[i]->value[k] = static_cast<double>(r.f32());
    }
    return header;
}

// ---- misc ------------------------------------------------------------------

std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt6(double v) {
    if (!std::isfinite(v)) return "0";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::vector<Tensor> chunk_batches(const Tensor& images, std::size_t batch) {
    std::vector<Tensor> out;
    const std::size_t n = images.dim(0);
    for (std::size_t lo = 0; lo < n; lo += batch) {
        const std::size_t m = std::min(batch, n - lo);
        if (m < 2 && !out.empty()) break;  // drop a trailing singleton
        out.push_back(models::slice_batch(images, lo, m));
    }
    return out;
}

}  // namespace

// ---- config ----------------------------------------------------------------

void ExperimentConfig::validate() const {
    if (dataset.classes < 2) throw ConfigError("dataset.classes must be >= 2");
    if (dataset.per_class_train < 1 || dataset.per_class_test < 1)
        throw ConfigError("dataset per-class counts must be positive");
    if (teacher.arch != "small_cnn" && teacher.arch != "tiny_resnet")
        throw ConfigError("teacher.arch must be 'small_cnn' or 'tiny_resnet'");
    if (teacher.width < 2) throw ConfigError("teacher.width must be >= 2");
    if (weight_bits < 2 || weight_bits > 8 || act_bits < 2 || act_bits > 8)
        throw ConfigError("bit-widths must lie in [2, 8]");
    if (synthesis.classes != dataset.classes)
        throw ConfigError("synthesis.classes must match dataset.classes");
    try {
        synthesis.validate();
        finetune.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

json to_json(const ExperimentConfig& cfg) {
    return {{"dataset", dataset_to_json(cfg.dataset)},
            {"teacher", teacher_to_json(cfg.teacher)},
            {"synthesis", synthesis_to_json(cfg.synthesis)},
            {"finetune", finetune_to_json(cfg.finetune)},
            {"weight_bits", cfg.weight_bits},
            {"act_bits", cfg.act_bits},
            {"out_dir", cfg.out_dir}};
}

ExperimentConfig config_from_json(const json& j) {
    expect_object(j, "config", {"dataset", "teacher", "synthesis", "finetune", "weight_bits",
                                "act_bits", "out_dir"});
    ExperimentConfig cfg;
    if (j.contains("dataset")) cfg.dataset = dataset_from_json(j.at("dataset"));
    if (j.contains("teacher")) cfg.teacher = teacher_from_json(j.at("teacher"));
    if (j.contains("synthesis")) cfg.synthesis = synthesis_from_json(j.at("synthesis"));
    if (j.contains("finetune")) cfg.finetune = finetune_from_json(j.at("finetune"));
    read_field(j, "config", "weight_bits", cfg.weight_bits);
    read_field(j, "config", "act_bits", cfg.act_bits);
    read_field(j, "config", "out_dir", cfg.out_dir);
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    return config_from_json(j);
}

void apply_override(ExperimentConfig& cfg, const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override '" + spec + "': expected key.path=value");
    const std::string path = spec.substr(0, eq);
    const std::string value = spec.substr(eq + 1);

    std::vector<std::string> keys;
    std::stringstream ss(path);
    std::string tok;
    while (std::getline(ss, tok, '.')) {
        if (tok.empty()) throw ConfigError("override '" + spec + "': empty path segment");
        keys.push_back(tok);
    }

    json root = to_json(cfg);
    json* node = &root;
    for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
        if (!node->is_object() || !node->contains(keys[i]))
            throw ConfigError("override '" + spec + "': no such config path");
        node = &(*node)[keys[i]];
    }
    if (!node->is_object() || !node->contains(keys.back()))
        throw ConfigError("override '" + spec + "': no such config path");
    json& leaf = (*node)[keys.back()];
    if (leaf.is_object() || leaf.is_array())
        throw ConfigError("override '" + spec + "': path names a section, not a field");

    json parsed = json::parse(value, nullptr, false);
    leaf = parsed.is_discarded() ? json(value) : parsed;
    cfg = config_from_json(root);
}

std::string resolve_out_dir(const ExperimentConfig& cfg) {
    if (!cfg.out_dir.empty()) return cfg.out_dir;
    if (const char* env = std::getenv("ZSQ_FORGE_OUT"); env && *env) return env;
    return "./zsq-runs";
}

// ---- checkpoints -----------------------------------------------------------

void save_checkpoint(nn::Graph& model, const CheckpointMeta& meta, const std::string& path) {
    json header = {{"kind", "float"},
                   {"arch", meta.arch},
                   {"classes", meta.classes},
                   {"width", meta.width}};
    write_file(path, pack_checkpoint(model, std::move(header)));
}

nn::Graph load_checkpoint(const std::string& path, CheckpointMeta* meta) {
    nn::Graph g;
    unpack_checkpoint(path, "float", g, meta);
    return g;
}

void save_quant_checkpoint(quant::FakeQuantModel& model, const CheckpointMeta& meta,
                           const std::string& path) {
    nn::Graph& g = model.graph();
    json param_qp = json::array();
    for (nn::Param* p : g.params())
        if (p->qp) param_qp.push_back({{"name", p->name}, {"qp", qp_to_json(*p->qp)}});

    json act_sites = json::array();
    for (int node : g.actquant_nodes()) {
        auto* aq = dynamic_cast<nn::ActQuant*>(g.layer(node));
        json site = {{"name", g.node_name(node)},
                     {"observer",
                      {{"seen", aq->observer.seen},
                       {"lo", aq->observer.lo},
                       {"hi", aq->observer.hi},
                       {"decay", aq->observer.decay}}}};
        site["qp"] = aq->qp ? qp_to_json(*aq->qp) : json(nullptr);
        act_sites.push_back(std::move(site));
    }

    json header = {{"kind", "quant"},
                   {"arch", meta.arch},
                   {"classes", meta.classes},
                   {"width", meta.width},
                   {"weight_bits", model.weight_bits()},
                   {"act_bits", model.act_bits()},
                   {"calibrated", model.calibrated()},
                   {"freeze_activation_ranges", model.freeze_activation_ranges},
                   {"param_qp", std::move(param_qp)},
                   {"act_sites", std::move(act_sites)}};
    write_file(path, pack_checkpoint(g, std::move(header)));
}

quant::FakeQuantModel load_quant_checkpoint(const std::string& path, CheckpointMeta* meta) {
    nn::Graph g;
    json header = unpack_checkpoint(path, "quant", g, meta);

    quant::FakeQuantModel model(std::move(g), header.value("weight_bits", 8),
                                header.value("act_bits", 8));
    nn::Graph& mg = model.graph();

    std::map<std::string, nn::Param*> by_name;
    for (nn::Param* p : mg.params()) by_name[p->name] = p;
    for (const auto& rec : header.value("param_qp", json::array())) {
        auto it = by_name.find(rec.at("name").get<std::string>());
        if (it == by_name.end())
            throw ConfigError("checkpoint: quantizer record for unknown tensor");
        it->second->qp = qp_from_json(rec.at("qp"));
    }

    const auto& sites = header.value("act_sites", json::array());
    const auto& nodes = mg.actquant_nodes();
    if (sites.size() != nodes.size())
        throw ConfigError("checkpoint: activation-site count mismatch");
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        auto* aq = dynamic_cast<nn::ActQuant*>(mg.layer(nodes[i]));
        const json& site = sites[i];
        if (site.at("name").get<std::string>() != mg.node_name(nodes[i]))
            throw ConfigError("checkpoint: activation-site name mismatch");
        const json& obs = site.at("observer");
        aq->observer.seen = obs.at("seen").get<bool>();
        aq->observer.lo = obs.at("lo").get<double>();
        aq->observer.hi = obs.at("hi").get<double>();
        aq->observer.decay = obs.at("decay").get<double>();
        aq->qp = site.at("qp").is_null() ? std::nullopt
                                         : std::optional<quant::QuantParams>(qp_from_json(site.at("qp")));
    }

    model.freeze_activation_ranges = header.value("freeze_activation_ranges", true);
    model.set_calibrated(header.value("calibrated", false));
    return model;
}

// ---- synthetic dataset directory -------------------------------------------

void save_synthetic(const synthesis::SyntheticDataset& ds, const std::string& dir) {
    fs::create_directories(dir);
    const std::size_t n = ds.images.dim(0);
    const std::size_t batch = std::max<std::size_t>(1, ds.config.batch);

    json batches = json::array();
    std::size_t idx = 0;
    for (std::size_t lo = 0; lo < n; lo += batch, ++idx) {
        const std::size_t m = std::min(batch, n - lo);
        char name[32];
        std::snprintf(name, sizeof(name), "batch_%04zu.f32", idx);
        Tensor part = models::slice_batch(ds.images, lo, m);
        std::string bytes;
        bytes.reserve(part.size() * 4);
        for (std::size_t i = 0; i < part.size(); ++i)
            put_f32(bytes, static_cast<float>(part[i]));
        write_file((fs::path(dir) / name).string(), bytes);
        batches.push_back({{"file", name}, {"shape", part.shape()}});
    }

    json manifest = {{"version", kVersion},
                     {"config", synthesis_to_json(ds.config)},
                     {"labels", ds.labels},
                     {"d_teacher", ds.d_teacher},
                     {"loss_traces", ds.loss_traces},
                     {"batches", std::move(batches)}};
    write_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

synthesis::SyntheticDataset load_synthetic(const std::string& dir) {
    json manifest;
    try {
        manifest = json::parse(read_file((fs::path(dir) / "manifest.json").string()));
    } catch (const json::exception& e) {
        throw ConfigError("synthetic dataset '" + dir + "': " + e.what());
    }

    synthesis::SyntheticDataset ds;
    ds.config = synthesis_from_json(manifest.at("config"));
    ds.labels = manifest.at("labels").get<std::vector<int>>();
    ds.d_teacher = manifest.at("d_teacher").get<Vec>();
    ds.loss_traces = manifest.at("loss_traces").get<std::vector<Vec>>();

    std::vector<double> values;
    std::vector<std::size_t> tail_shape;
    std::size_t rows = 0;
    for (const auto& b : manifest.at("batches")) {
        const auto shape = b.at("shape").get<std::vector<std::size_t>>();
        if (shape.size() != 4) throw ConfigError("synthetic dataset: batch shape must be rank 4");
        std::size_t count = 1;
        for (std::size_t d : shape) count *= d;
        const std::string bytes =
            read_file((fs::path(dir) / b.at("file").get<std::string>()).string());
        if (bytes.size() != count * 4)
            throw ConfigError("synthetic dataset: batch file length mismatch");
        ByteReader r{bytes};
        for (std::size_t i = 0; i < count; ++i) values.push_back(static_cast<double>(r.f32()));
        rows += shape[0];
        if (tail_shape.empty())
            tail_shape.assign(shape.begin() + 1, shape.end());
        else if (!std::equal(tail_shape.begin(), tail_shape.end(), shape.begin() + 1))
            throw ConfigError("synthetic dataset: inconsistent batch shapes");
    }
    if (rows != ds.labels.size())
        throw ConfigError("synthetic dataset: image/label count mismatch");

    ds.images = Tensor({rows, tail_shape.at(0), tail_shape.at(1), tail_shape.at(2)});
    std::copy(values.begin(), values.end(), ds.images.data());
    return ds;
}

// ---- CSV -------------------------------------------------------------------

void write_metrics_csv(const std::vector<finetune::EpochMetrics>& metrics,
                       const std::string& path) {
    std::string out = "epoch,lr,train_loss,fa_term,kl_term,test_top1\n";
    for (const auto& m : metrics)
        out += std::to_string(m.epoch) + "," + fmt(m.lr) + "," + fmt(m.train_loss) + "," +
               fmt(m.fa_term) + "," + fmt(m.kl_term) + "," + fmt(m.test_top1) + "\n";
    write_file(path, out);
}

void write_difficulty_csv(const difficulty::DifficultyReport& report, const std::string& path) {
    std::string out = "bin_lo,bin_hi,fraction,error_rate\n";
    for (std::size_t i = 0; i < report.fractions.size(); ++i) {
        const double er =
            i < report.error_rates.size() ? report.error_rates[i] : std::nan("");
        out += fmt(report.bin_edges[i]) + "," + fmt(report.bin_edges[i + 1]) + "," +
               fmt(report.fractions[i]) + "," + fmt(er) + "\n";
    }
    write_file(path, out);
}

void write_ablation_csv(const AblationGrid& grid, const std::string& path) {
    std::string out = "hss,sdp,fa,seed,top1\n";
    for (const auto& r : grid.rows)
        out += std::to_string(int(r.hss)) + "," + std::to_string(int(r.sdp)) + "," +
               std::to_string(int(r.fa)) + "," + std::to_string(r.seed) + "," +
               fmt(r.failed ? std::nan("") : r.top1) + "\n";
    write_file(path, out);
}

// ---- ablation grid ---------------------------------------------------------

AblationGrid run_ablation(const ExperimentConfig& cfg, int seeds, const std::string& out_dir) {
    cfg.validate();
    if (seeds < 1) throw ConfigError("ablation needs at least one seed");
    if (!(cfg.synthesis.gamma > 0.0))
        throw ConfigError("ablation needs synthesis.gamma > 0 for the HSS-on rows");

    auto ds = models::generate_toy_dataset(cfg.dataset.seed, cfg.dataset.classes,
                                           cfg.dataset.per_class_train,
                                           cfg.dataset.per_class_test);
    nn::Graph teacher = models::build_model(cfg.teacher.arch, ds.classes, cfg.teacher.width);
    models::init_params(teacher, cfg.teacher.init_seed);
    models::train_teacher(teacher, ds, cfg.teacher.schedule);
    const auto clip = synthesis::ClipRange::from_dataset(ds);

    // one hard-focused and one plain synthetic set per seed, shared by rows
    std::vector<synthesis::SyntheticDataset> data_on, data_off;
    for (int s = 0; s < seeds; ++s) {
        synthesis::SynthesisConfig on = cfg.synthesis;
        on.seed = cfg.synthesis.seed + static_cast<std::uint64_t>(s);
        on.mode = synthesis::ObjectiveMode::HFNL;
        synthesis::SynthesisConfig off = on;
        off.gamma = 0.0;
        off.mode = synthesis::ObjectiveMode::FNL;
        data_on.push_back(synthesis::synthesize_dataset(teacher, on, clip));
        data_off.push_back(synthesis::synthesize_dataset(teacher, off, clip));
    }

    AblationGrid grid;
    for (int combo = 0; combo < 8; ++combo) {
        const bool hss = combo & 4, sdp = combo & 2, fa = combo & 1;
        AblationSummary summary;
        summary.hss = hss;
        summary.sdp = sdp;
        summary.fa = fa;
        Vec scores;
        for (int s = 0; s < seeds; ++s) {
            const auto& data = hss ? data_on[s] : data_off[s];
            finetune::FinetuneConfig fcfg = cfg.finetune;
            fcfg.seed = cfg.finetune.seed + static_cast<std::uint64_t>(s);
            fcfg.promotion.enabled = sdp;
            fcfg.objective = fa ? finetune::FinetuneConfig::Objective::HAST
                                : finetune::FinetuneConfig::Objective::BaselineCeKl;

            AblationRow row;
            row.hss = hss;
            row.sdp = sdp;
            row.fa = fa;
            row.seed = fcfg.seed;
            try {
                quant::FakeQuantModel student(teacher, cfg.weight_bits, cfg.act_bits);
                student.calibrate(chunk_batches(data.images, fcfg.batch));
                auto state = finetune::finetune(data, teacher, std::move(student), fcfg,
                                                &ds.test_images, &ds.test_labels);
                if (state.diverged) {
                    row.failed = true;
                    row.top1 = std::nan("");
                } else {
                    row.top1 = state.final_top1;
                    scores.push_back(row.top1);
                }
                if (!out_dir.empty()) {
                    char sub[64];
                    std::snprintf(sub, sizeof(sub), "row_h%d_s%d_f%d_seed%llu", int(hss),
                                  int(sdp), int(fa),
                                  static_cast<unsigned long long>(fcfg.seed));
                    write_metrics_csv(state.metrics,
                                      (fs::path(out_dir) / sub / "metrics.csv").string());
                }
            } catch (const DivergenceError&) {
                row.failed = true;
                row.top1 = std::nan("");
            }
            grid.rows.push_back(row);
        }
        summary.completed = static_cast<int>(scores.size());
        if (!scores.empty()) {
            double m = 0.0;
            for (double v : scores) m += v;
            m /= static_cast<double>(scores.size());
            double var = 0.0;
            for (double v : scores) var += (v - m) * (v - m);
            summary.mean = m;
            summary.stdev = scores.size() > 1
                                ? std::sqrt(var / static_cast<double>(scores.size() - 1))
                                : 0.0;
        } else {
            summary.mean = std::nan("");
            summary.stdev = std::nan("");
        }
        grid.summaries.push_back(summary);
    }

    const auto& empty_row = grid.summaries.front();  // all off
    const auto& full_row = grid.summaries.back();    // all on
    grid.full_beats_empty = empty_row.completed > 0 && full_row.completed > 0 &&
                            full_row.mean >= empty_row.mean;
    return grid;
}

// ---- SVG -------------------------------------------------------------------

namespace {

constexpr double kW = 720, kH = 440, kL = 60, kR = 20, kT = 40, kB = 50;
const char* kPalette[6] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string svg_open(const std::string& title) {
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt6(kW) +
                    "\" height=\"" + fmt6(kH) + "\" viewBox=\"0 0 " + fmt6(kW) + " " + fmt6(kH) +
                    "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + fmt6(kW / 2) +
         "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" +
         title + "</text>\n";
    // axes
    s += "<line x1=\"" + fmt6(kL) + "\" y1=\"" + fmt6(kH - kB) + "\" x2=\"" + fmt6(kW - kR) +
         "\" y2=\"" + fmt6(kH - kB) + "\" stroke=\"black\"/>\n";
    s += "<line x1=\"" + fmt6(kL) + "\" y1=\"" + fmt6(kT) + "\" x2=\"" + fmt6(kL) + "\" y2=\"" +
         fmt6(kH - kB) + "\" stroke=\"black\"/>\n";
    return s;
}

std::string axis_labels(double lo, double hi) {
    std::string s;
    s += "<text x=\"" + fmt6(kL - 6) + "\" y=\"" + fmt6(kH - kB) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + fmt6(lo) +
         "</text>\n";
    s += "<text x=\"" + fmt6(kL - 6) + "\" y=\"" + fmt6(kT + 10) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + fmt6(hi) +
         "</text>\n";
    return s;
}

}  // namespace

std::string svg_line_chart(const std::string& title, const std::vector<std::string>& names,
                           const std::vector<Vec>& series) {
    double lo = 0.0, hi = 1.0;
    bool any = false;
    std::size_t len = 0;
    for (const auto& v : series) {
        len = std::max(len, v.size());
        for (double x : v)
            if (std::isfinite(x)) {
                lo = any ? std::min(lo, x) : x;
                hi = any ? std::max(hi, x) : x;
                any = true;
            }
    }
    if (!any || hi - lo < 1e-12) hi = lo + 1.0;

    std::string s = svg_open(title);
    s += axis_labels(lo, hi);
    const double xspan = len > 1 ? static_cast<double>(len - 1) : 1.0;
    for (std::size_t k = 0; k < series.size(); ++k) {
        std::string pts;
        for (std::size_t i = 0; i < series[k].size(); ++i) {
            if (!std::isfinite(series[k][i])) continue;
            const double px = kL + (kW - kL - kR) * static_cast<double>(i) / xspan;
            const double py = (kH - kB) - (kH - kT - kB) * (series[k][i] - lo) / (hi - lo);
            pts += fmt6(px) + "," + fmt6(py) + " ";
        }
        s += "<polyline fill=\"none\" stroke=\"" + std::string(kPalette[k % 6]) +
             "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
        if (k < names.size())
            s += "<text x=\"" + fmt6(kW - kR - 6) + "\" y=\"" +
                 fmt6(kT + 16.0 * static_cast<double>(k + 1)) +
                 "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" +
                 kPalette[k % 6] + "\">" + names[k] + "</text>\n";
    }
    return s + "</svg>\n";
}

std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& labels,
                          const Vec& values, bool log_scale) {
    Vec plot(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        double v = std::isfinite(values[i]) ? values[i] : 0.0;
        plot[i] = log_scale ? std::log10(std::max(v, 1e-6)) : v;
    }
    double lo = 0.0, hi = 1.0;
    if (!plot.empty()) {
        lo = *std::min_element(plot.begin(), plot.end());
        hi = *std::max_element(plot.begin(), plot.end());
    }
    if (!log_scale) lo = std::min(lo, 0.0);
    if (hi - lo < 1e-12) hi = lo + 1.0;

    std::string s = svg_open(title);
    s += axis_labels(log_scale ? std::pow(10.0, lo) : lo, log_scale ? std::pow(10.0, hi) : hi);
    const double n = static_cast<double>(std::max<std::size_t>(plot.size(), 1));
    const double slot = (kW - kL - kR) / n;
    for (std::size_t i = 0; i < plot.size(); ++i) {
        const double frac = (plot[i] - lo) / (hi - lo);
        const double h = (kH - kT - kB) * frac;
        const double x = kL + slot * static_cast<double>(i) + slot * 0.15;
        s += "<rect x=\"" + fmt6(x) + "\" y=\"" + fmt6(kH - kB - h) + "\" width=\"" +
             fmt6(slot * 0.7) + "\" height=\"" + fmt6(h) + "\" fill=\"#1f77b4\"/>\n";
        if (i < labels.size())
            s += "<text x=\"" + fmt6(x + slot * 0.35) + "\" y=\"" + fmt6(kH - kB + 14) +
                 "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" +
                 labels[i] + "</text>\n";
    }
    return s + "</svg>\n";
}

// ---- report ----------------------------------------------------------------

namespace {

struct CsvTable {
    std::vector<std::string> header;
    std::vector<Vec> columns;  // NaN for non-numeric cells
};

CsvTable parse_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read '" + path + "'");
    CsvTable t;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (first) {
            t.header = cells;
            t.columns.resize(cells.size());
            first = false;
            continue;
        }
        for (std::size_t i = 0; i < t.columns.size(); ++i) {
            double v = std::nan("");
            if (i < cells.size() && !cells[i].empty()) {
                char* end = nullptr;
                const double parsed = std::strtod(cells[i].c_str(), &end);
                if (end && *end == '\0') v = parsed;
            }
            t.columns[i].push_back(v);
        }
    }
    return t;
}

std::optional<std::size_t> column(const CsvTable& t, const std::string& name) {
    for (std::size_t i = 0; i < t.header.size(); ++i)
        if (t.header[i] == name) return i;
    return std::nullopt;
}

void render_csv(const fs::path& path) {
    const std::string stem = path.stem().string();
    const CsvTable t = parse_csv(path.string());
    const auto sibling = [&](const std::string& suffix) {
        return (path.parent_path() / (stem + suffix)).string();
    };

    if (stem == "metrics" || stem.rfind("metrics", 0) == 0) {
        std::vector<std::string> names;
        std::vector<Vec> series;
        for (const char* c : {"train_loss", "fa_term", "kl_term"})
            if (auto i = column(t, c)) {
                names.push_back(c);
                series.push_back(t.columns[*i]);
            }
        write_file(sibling("_loss.svg"), svg_line_chart("training objective", names, series));
        if (auto i = column(t, "test_top1"))
            write_file(sibling("_top1.svg"),
                       svg_line_chart("test top-1", {"test_top1"}, {t.columns[*i]}));
        return;
    }
    if (stem.find("difficulty") != std::string::npos) {
        auto frac = column(t, "fraction");
        auto blo = column(t, "bin_lo");
        if (!frac) return;
        std::vector<std::string> labels;
        if (blo)
            for (double v : t.columns[*blo]) labels.push_back(fmt6(v));
        write_file(sibling(".svg"),
                   svg_bar_chart(stem + " (log fraction)", labels, t.columns[*frac], true));
        if (auto er = column(t, "error_rate")) {
            bool any = false;
            for (double v : t.columns[*er]) any |= std::isfinite(v);
            if (any)
                write_file(sibling("_error.svg"),
                           svg_bar_chart(stem + " error rate", labels, t.columns[*er], false));
        }
        return;
    }
    if (stem == "loss_curves") {
        std::vector<std::string> names;
        std::vector<Vec> series;
        for (std::size_t i = 1; i < t.header.size(); ++i) {
            names.push_back(t.header[i]);
            series.push_back(t.columns[i]);
        }
        write_file(sibling(".svg"), svg_line_chart("synthesis loss", names, series));
        return;
    }
    if (stem == "ablation") {
        auto top1 = column(t, "top1");
        if (!top1) return;
        std::vector<std::string> labels;
        auto h = column(t, "hss"), s = column(t, "sdp"), f = column(t, "fa");
        for (std::size_t r = 0; r < t.columns[*top1].size(); ++r) {
            std::string lab;
            if (h && s && f)
                lab = std::to_string(int(t.columns[*h][r])) + std::to_string(int(t.columns[*s][r])) +
                      std::to_string(int(t.columns[*f][r]));
            labels.push_back(lab);
        }
        write_file(sibling(".svg"),
                   svg_bar_chart("ablation top-1 (hss/sdp/fa)", labels, t.columns[*top1], false));
    }
}

}  // namespace

void render_reports(const std::string& dir) {
    if (!fs::exists(dir)) throw ConfigError("report: no such directory '" + dir + "'");
    std::vector<fs::path> csvs;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".csv") csvs.push_back(e.path());
    std::sort(csvs.begin(), csvs.end());
    for (const auto& p : csvs) render_csv(p);
}

// ---- CLI -------------------------------------------------------------------

namespace {

void write_manifest(const fs::path& root, const std::string& command,
                    const ExperimentConfig& cfg, const std::vector<std::string>& overrides) {
    json m = {{"version", kVersion},
              {"command", command},
              {"overrides", overrides},
              {"config", to_json(cfg)}};
    write_file((root / "manifest.json").string(), m.dump(2) + "\n");
}

models::ToyDataset make_dataset(const ExperimentConfig& cfg) {
    return models::generate_toy_dataset(cfg.dataset.seed, cfg.dataset.classes,
                                        cfg.dataset.per_class_train, cfg.dataset.per_class_test);
}

// Load <root>/teacher.ckpt when present, otherwise train one there.
nn::Graph ensure_teacher(const ExperimentConfig& cfg, const models::ToyDataset& ds,
                         const fs::path& root) {
    const fs::path path = root / "teacher.ckpt";
    if (fs::exists(path)) {
        CheckpointMeta meta;
        nn::Graph g = load_checkpoint(path.string(), &meta);
        if (meta.arch != cfg.teacher.arch || meta.classes != cfg.dataset.classes)
            throw ConfigError("teacher checkpoint does not match the configured model");
        return g;
    }
    nn::Graph teacher = models::build_model(cfg.teacher.arch, ds.classes, cfg.teacher.width);
    models::init_params(teacher, cfg.teacher.init_seed);
    auto report = models::train_teacher(teacher, ds, cfg.teacher.schedule);
    save_checkpoint(teacher, {cfg.teacher.arch, ds.classes, cfg.teacher.width}, path.string());
    json rep = {{"test_top1", report.test_top1},
                {"train_top1", report.train_top1},
                {"epoch_losses", report.epoch_losses}};
    write_file((root / "teacher_report.json").string(), rep.dump(2) + "\n");
    return teacher;
}

synthesis::SyntheticDataset ensure_synthetic(const ExperimentConfig& cfg,
                                             const models::ToyDataset& ds, nn::Graph& teacher,
                                             const fs::path& root) {
    const fs::path dir = root / "synthetic";
    if (fs::exists(dir / "manifest.json")) return load_synthetic(dir.string());
    auto data = synthesis::synthesize_dataset(teacher, cfg.synthesis,
                                              synthesis::ClipRange::from_dataset(ds));
    save_synthetic(data, dir.string());
    return data;
}

Vec mean_trace(const std::vector<Vec>& traces) {
    std::size_t len = 0;
    for (const auto& t : traces) len = std::max(len, t.size());
    Vec out(len, 0.0);
    for (std::size_t i = 0; i < len; ++i) {
        double sum = 0.0;
        int n = 0;
        for (const auto& t : traces)
            if (i < t.size()) {
                sum += t[i];
                ++n;
            }
        out[i] = n ? sum / n : std::nan("");
    }
    return out;
}

double tail_mass(const difficulty::DifficultyReport& rep, double from) {
    double mass = 0.0;
    for (std::size_t i = 0; i < rep.fractions.size(); ++i)
        if (rep.bin_edges[i] >= from - 1e-12) mass += rep.fractions[i];
    return mass;
}

int cmd_train_teacher(const ExperimentConfig& cfg, const fs::path& root) {
    auto ds = make_dataset(cfg);
    fs::remove(root / "teacher.ckpt");  // explicit retrain
    ensure_teacher(cfg, ds, root);
    std::cout << "teacher checkpoint: " << (root / "teacher.ckpt").string() << "\n";
    return 0;
}

int cmd_synthesize(const ExperimentConfig& cfg, const fs::path& root) {
    auto ds = make_dataset(cfg);
    nn::Graph teacher = ensure_teacher(cfg, ds, root);
    auto data = synthesis::synthesize_dataset(teacher, cfg.synthesis,
                                              synthesis::ClipRange::from_dataset(ds));
    save_synthetic(data, (root / "synthetic").string());
    double mean_d = 0.0;
    for (double d : data.d_teacher) mean_d += d;
    if (!data.d_teacher.empty()) mean_d /= static_cast<double>(data.d_teacher.size());
    std::cout << "synthesized " << data.labels.size() << " samples, mean teacher difficulty "
              << fmt6(mean_d) << "\n";
    return 0;
}

int cmd_finetune(const ExperimentConfig& cfg, const fs::path& root) {
    auto ds = make_dataset(cfg);
    nn::Graph teacher = ensure_teacher(cfg, ds, root);
    auto data = ensure_synthetic(cfg, ds, teacher, root);

    quant::FakeQuantModel student(teacher, cfg.weight_bits, cfg.act_bits);
    student.calibrate(chunk_batches(data.images, cfg.finetune.batch));
    auto state = finetune::finetune(data, teacher, std::move(student), cfg.finetune,
                                    &ds.test_images, &ds.test_labels);

    write_metrics_csv(state.metrics, (root / "metrics.csv").string());
    if (!state.grad_cosines.empty()) {
        std::string out = "iteration,cosine\n";
        for (std::size_t i = 0; i < state.grad_cosines.size(); ++i)
            out += std::to_string(i) + "," + fmt(state.grad_cosines[i]) + "\n";
        write_file((root / "grad_cosines.csv").string(), out);
    }
    save_quant_checkpoint(state.student, {cfg.teacher.arch, ds.classes, cfg.teacher.width},
                          (root / "student.ckpt").string());
    if (state.diverged) {
        std::cerr << "fine-tuning diverged: " << state.divergence_note << "\n";
        return 3;
    }
    std::cout << "final test top-1: " << fmt6(state.final_top1) << " (best " << fmt6(state.best_top1)
              << " at epoch " << state.best_epoch << ")\n";
    return 0;
}

int cmd_evaluate(const ExperimentConfig& cfg, const fs::path& root) {
    auto ds = make_dataset(cfg);
    const fs::path path = root / "student.ckpt";
    if (!fs::exists(path)) throw ConfigError("evaluate: missing " + path.string());
    auto student = load_quant_checkpoint(path.string());
    const double top1 =
        finetune::evaluate(student.graph(), ds.test_images, ds.test_labels, true);
    json rep = {{"test_top1", top1},
                {"weight_bits", student.weight_bits()},
                {"act_bits", student.act_bits()}};
    write_file((root / "evaluate.json").string(), rep.dump(2) + "\n");
    std::cout << "test top-1: " << fmt6(top1) << "\n";
    return 0;
}

int cmd_analyze(const ExperimentConfig& cfg, const fs::path& root) {
    if (!(cfg.synthesis.gamma > 0.0))
        throw ConfigError("analyze needs synthesis.gamma > 0 for the hard-focused set");
    auto ds = make_dataset(cfg);
    nn::Graph teacher = ensure_teacher(cfg, ds, root);
    const auto clip = synthesis::ClipRange::from_dataset(ds);

    synthesis::SynthesisConfig hard = cfg.synthesis;
    hard.mode = synthesis::ObjectiveMode::HFNL;
    synthesis::SynthesisConfig plain = hard;
    plain.gamma = 0.0;
    plain.mode = synthesis::ObjectiveMode::FNL;
    auto set_hard = synthesis::synthesize_dataset(teacher, hard, clip);
    auto set_plain = synthesis::synthesize_dataset(teacher, plain, clip);

    auto hist_hard =
        difficulty::difficulty_histogram(teacher, set_hard.images, set_hard.labels);
    auto hist_plain =
        difficulty::difficulty_histogram(teacher, set_plain.images, set_plain.labels);
    write_difficulty_csv(hist_hard, (root / "difficulty_hfnl.csv").string());
    write_difficulty_csv(hist_plain, (root / "difficulty_fnl.csv").string());
    write_difficulty_csv(
        difficulty::error_rate_by_difficulty(teacher, ds.test_images, ds.test_labels),
        (root / "difficulty_error_test.csv").string());

    const Vec curve_hard = mean_trace(set_hard.loss_traces);
    const Vec curve_plain = mean_trace(set_plain.loss_traces);
    std::string out = "iter,fnl,hfnl\n";
    for (std::size_t i = 0; i < std::max(curve_hard.size(), curve_plain.size()); ++i)
        out += std::to_string(i) + "," +
               fmt(i < curve_plain.size() ? curve_plain[i] : std::nan("")) + "," +
               fmt(i < curve_hard.size() ? curve_hard[i] : std::nan("")) + "\n";
    write_file((root / "loss_curves.csv").string(), out);

    const double tail_hard = tail_mass(hist_hard, 0.5);
    const double tail_plain = tail_mass(hist_plain, 0.5);
    json rep = {{"tail_mass_hfnl", tail_hard},
                {"tail_mass_fnl", tail_plain},
                {"hfnl_tail_greater", tail_hard > tail_plain}};
    write_file((root / "analyze.json").string(), rep.dump(2) + "\n");
    std::cout << "d>=0.5 mass: hfnl " << fmt6(tail_hard) << ", fnl " << fmt6(tail_plain) << "\n";
    return 0;
}

int cmd_ablate(const ExperimentConfig& cfg, const fs::path& root) {
    auto grid = run_ablation(cfg, 3, (root / "ablation").string());
    write_ablation_csv(grid, (root / "ablation.csv").string());
    std::string out = "hss,sdp,fa,mean,std,completed\n";
    for (const auto& s : grid.summaries)
        out += std::to_string(int(s.hss)) + "," + std::to_string(int(s.sdp)) + "," +
               std::to_string(int(s.fa)) + "," + fmt(s.mean) + "," + fmt(s.stdev) + "," +
               std::to_string(s.completed) + "\n";
    write_file((root / "ablation_summary.csv").string(), out);
    for (const auto& s : grid.summaries)
        std::cout << "hss=" << s.hss << " sdp=" << s.sdp << " fa=" << s.fa << ": " << fmt6(s.mean)
                  << " +- " << fmt6(s.stdev) << " (" << s.completed << " runs)\n";
    std::cout << (grid.full_beats_empty ? "full >= empty on mean top-1\n"
                                        : "warning: full < empty on mean top-1\n");
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"zero-shot quantization toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_flag;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed_flag;
    app.add_option("--config", config_path, "experiment config (JSON)");
    app.add_option("--seed", seed_flag, "override the synthesis and fine-tuning seeds");
    app.add_option("--out", out_flag, "output directory");
    app.add_option("--override", overrides, "dot-path config override key=value");

    const char* subs[] = {"train-teacher", "synthesize", "finetune", "evaluate",
                          "analyze",       "ablate",     "report"};
    const char* descs[] = {"train and checkpoint the reference model",
                           "optimize a synthetic calibration set",
                           "fine-tune the quantized student",
                           "evaluate a student checkpoint",
                           "difficulty histograms, error rates and loss curves",
                           "run the 8-row toggle grid over 3 seeds",
                           "render CSV artifacts to SVG"};
    for (int i = 0; i < 7; ++i) app.add_subcommand(subs[i], descs[i])->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        ExperimentConfig cfg =
            config_path.empty() ? ExperimentConfig{} : load_config(config_path);
        for (const auto& o : overrides) apply_override(cfg, o);
        if (seed_flag) {
            cfg.synthesis.seed = *seed_flag;
            cfg.finetune.seed = *seed_flag;
        }
        if (!out_flag.empty()) cfg.out_dir = out_flag;
        cfg.validate();

        const fs::path root = resolve_out_dir(cfg);
        fs::create_directories(root);
        const std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd != "report") write_manifest(root, cmd, cfg, overrides);

        if (cmd == "train-teacher") return cmd_train_teacher(cfg, root);
        if (cmd == "synthesize") return cmd_synthesize(cfg, root);
        if (cmd == "finetune") return cmd_finetune(cfg, root);
        if (cmd == "evaluate") return cmd_evaluate(cfg, root);
        if (cmd == "analyze") return cmd_analyze(cfg, root);
        if (cmd == "ablate") return cmd_ablate(cfg, root);
        render_reports(root.string());
        return 0;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace zsq::harness
