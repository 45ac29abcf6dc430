#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "zsq/difficulty.hpp"
#include "zsq/finetune.hpp"
#include "zsq/models.hpp"
#include "zsq/nn.hpp"
#include "zsq/quant_model.hpp"
#include "zsq/synthesis.hpp"
#include "zsq/tensor.hpp"

namespace zsq::harness {

inline constexpr const char* kVersion = "zsq-forge-1.0.0";

struct DatasetConfig {
    std::uint64_t seed = 11;
    int classes = 10;
    int per_class_train = 100;
    int per_class_test = 20;
};

struct TeacherConfig {
    std::string arch = "small_cnn";
    std::size_t width = 8;
    std::uint64_t init_seed = 12;
    models::TeacherSchedule schedule;
};

// Everything a run needs, serializable as strict JSON: unknown keys and
// type mismatches are rejected, dot-path overrides edit individual fields.
struct ExperimentConfig {
    DatasetConfig dataset;
    TeacherConfig teacher;
    synthesis::SynthesisConfig synthesis;
    finetune::FinetuneConfig finetune;  // nests promotion + alignment
    int weight_bits = 3;
    int act_bits = 3;
    std::string out_dir;  // empty: $ZSQ_FORGE_OUT, then ./zsq-runs

    void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);

// Apply "dot.path.key=value" onto the config; the path must name an
// existing scalar field. Values parse as JSON first, bare words as strings.
void apply_override(ExperimentConfig& cfg, const std::string& spec);

// Output root after defaulting; creates nothing.
std::string resolve_out_dir(const ExperimentConfig& cfg);

// ---- checkpoint container -------------------------------------------------
// magic + format version, JSON header (arch, classes, width, named tensor
// shapes, quantizer records), then the tensors as little-endian float32 in
// header order. Length is validated against the header before any tensor is
// materialized. Saving canonicalizes the model's parameters to the stored
// 32-bit values, so a round-trip reproduces the forward pass exactly.

struct CheckpointMeta {
    std::string arch;
    int classes = 0;
    std::size_t width = 0;
};

void save_checkpoint(nn::Graph& model, const CheckpointMeta& meta, const std::string& path);
nn::Graph load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr);

void save_quant_checkpoint(quant::FakeQuantModel& model, const CheckpointMeta& meta,
                           const std::string& path);
quant::FakeQuantModel load_quant_checkpoint(const std::string& path,
                                            CheckpointMeta* meta = nullptr);

// ---- synthetic dataset directory ------------------------------------------
// manifest.json (config echo, labels, per-sample teacher difficulty, declared
// batch shapes) plus one raw little-endian float32 file per batch.

void save_synthetic(const synthesis::SyntheticDataset& ds, const std::string& dir);
synthesis::SyntheticDataset load_synthetic(const std::string& dir);

// ---- CSV + SVG emission ----------------------------------------------------

void write_metrics_csv(const std::vector<finetune::EpochMetrics>& metrics,
                       const std::string& path);
void write_difficulty_csv(const difficulty::DifficultyReport& report, const std::string& path);

struct AblationRow {
    bool hss = false;  // gamma > 0 during synthesis
    bool sdp = false;  // epsilon > 0 during fine-tuning
    bool fa = false;   // relaxed alignment objective vs CE+KL baseline
    std::uint64_t seed = 0;
    double top1 = 0.0;  // NaN when the run diverged
    bool failed = false;
};

struct AblationSummary {
    bool hss = false, sdp = false, fa = false;
    double mean = 0.0;
    double stdev = 0.0;
    int completed = 0;
};

struct AblationGrid {
    std::vector<AblationRow> rows;          // 8 combinations x seeds
    std::vector<AblationSummary> summaries;  // one per combination
    bool full_beats_empty = false;           // mean top1: all-on >= all-off
};

// All 8 toggle combinations over `seeds` fine-tuning/synthesis seeds, one
// shared teacher and dataset. A diverging row is recorded as failed; the grid
// continues. Per-row artifacts land under out_dir when it is non-empty.
AblationGrid run_ablation(const ExperimentConfig& cfg, int seeds = 3,
                          const std::string& out_dir = "");

void write_ablation_csv(const AblationGrid& grid, const std::string& path);

// Minimal standalone plots; both are pure functions of their inputs.
std::string svg_line_chart(const std::string& title, const std::vector<std::string>& names,
                           const std::vector<Vec>& series);
std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& labels,
                          const Vec& values, bool log_scale = false);

// Render every known CSV under dir (metrics.csv, difficulty_*.csv,
// loss_curves.csv, ablation.csv) to a sibling .svg.
void render_reports(const std::string& dir);

// ---- CLI -------------------------------------------------------------------
// Subcommands: train-teacher, synthesize, finetune, evaluate, analyze,
// ablate, report. Exit 0 on success, 2 on configuration errors, 3 on
// divergence.
int run_cli(int argc, const char* const* argv);

}  // namespace zsq::harness
