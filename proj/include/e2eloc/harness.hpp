#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "e2eloc/classifier.hpp"
#include "e2eloc/localization.hpp"
#include "e2eloc/optim.hpp"
#include "e2eloc/supervision.hpp"
#include "e2eloc/synthdata.hpp"

namespace e2eloc {

// Intersection over union of two boxes; 0 for disjoint or degenerate input.
double compute_iou(const BBox& a, const BBox& b);

struct ExperimentConfig {
    // loss weights and gradient gates
    double lambda_emb = 0.1;
    double lambda_att = 16.0;
    double lambda_aff = 16.0;
    double beta_att = 1.0;
    double beta_aff = 1.0;
    double margin = 1.0;     // center-separation hinge margin
    double ema_decay = 0.95; // class-center update

    // optimization
    double lr = 0.003;
    double lr_decay = 0.1;
    int lr_step_epochs = 30;
    int epochs = 30;
    int batch_size = 32;
    double momentum = 0.9;
    uint64_t seed = 1;

    // models
    AttNetConfig attnet;
    PreprocessConfig prep;
    AffNetConfig affnet;
    ClassifierConfig classifier;

    // data
    GlyphDatasetConfig glyph;
    AttnMapDatasetConfig attn;

    // benchmark training (Table 1 style runs)
    int bench_epochs = 40;
    double bench_lr = 0.05;
    int bench_batch = 32;

    // ablation
    int ablation_reps = 3;

    std::string out_dir = "out";
    int dump_crops = 0;  // write this many test crops after training
};

void validate(const ExperimentConfig& cfg);

// Plain-text key=value config file; '#' starts a comment. Keys are the
// flag names documented in the README (e.g. "lr", "glyph.train_count").
void apply_config_line(ExperimentConfig& cfg, const std::string& key, const std::string& value);
void load_config_file(ExperimentConfig& cfg, const std::string& path);
std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// End-to-end training

struct E2EModel {
    Localizer<float> loc;
    Classifier<float> clf;
    ClassCenters<float> centers;

    std::vector<Tensor<float>> parameters();
    std::vector<std::pair<std::string, Tensor<float>>> named_parameters();
    std::vector<Tensor<float>> localization_parameters();
};

E2EModel build_model(const ExperimentConfig& cfg);

struct EpochRow {
    int epoch = 0;
    double lr = 0;
    double loss = 0, ce = 0, emb = 0, att = 0, aff = 0;
    double train_acc = 0;
    double test_acc = 0;
    double mean_iou = 0;  // predicted crop box vs ground-truth glyph box
};

struct EvalResult {
    double accuracy = 0;
    double mean_iou = 0;
};

struct TrainOutput {
    std::vector<EpochRow> history;
    EvalResult final_eval;
};

// One optimizer step on one batch; exposed for the gate-semantics tests.
struct StepStats {
    double loss = 0, ce = 0, emb = 0, att = 0, aff = 0;
    int correct = 0;
};
StepStats train_step(const ExperimentConfig& cfg, E2EModel& model, SgdMomentum<float>& opt,
                     double lr, const std::vector<float>& images, const std::vector<int>& labels,
                     int batch);

TrainOutput train_e2e(const ExperimentConfig& cfg, E2EModel& model,
                      const std::vector<GlyphSample>& train_set,
                      const std::vector<GlyphSample>& test_set,
                      std::ostream* log = nullptr);

EvalResult evaluate(const ExperimentConfig& cfg, E2EModel& model,
                    const std::vector<GlyphSample>& test_set);

// Deterministic epoch permutation; depends only on (seed, epoch) so paired
// ablation rows consume identical data orders.
std::vector<int> epoch_permutation(uint64_t seed, int epoch, int n);

void write_metrics_csv(const std::vector<EpochRow>& history, const std::string& path);
std::vector<EpochRow> read_metrics_csv(const std::string& path);

// ---------------------------------------------------------------------------
// Affine-estimator benchmark (Table 1 protocol)

struct MetricsRow {
    std::string network;
    bool prep = false;
    size_t param_count = 0;
    double runtime_ms = 0;   // median single-map forward
    double sl1_error = 0;    // mean smooth L1 against target theta on test
    double iou80 = 0;        // fraction of test samples with IoU > 0.8
    double iou95 = 0;
    double mean_iou = 0;
};

std::vector<MetricsRow> run_affnet_bench(const ExperimentConfig& cfg, std::ostream* log = nullptr);
void write_table1_csv(const std::vector<MetricsRow>& rows, const std::string& path);

// ---------------------------------------------------------------------------
// Ablation (Table 2 protocol)

struct AblationRowSpec {
    std::string name;
    bool local_losses = false;  // lambda_att = lambda_aff = 0 when false
    double beta_att = 0;
    double beta_aff = 0;
};

// The five configurations, in table order.
std::vector<AblationRowSpec> ablation_rows();

struct AblationResult {
    AblationRowSpec spec;
    std::vector<double> accuracies;  // one per repetition
    double mean_accuracy = 0;
    uint64_t data_order_hash = 0;  // first-epoch permutation, must match across rows
};

std::vector<AblationResult> run_ablation(const ExperimentConfig& cfg, std::ostream* log = nullptr);
void write_table2_csv(const std::vector<AblationResult>& rows, const std::string& path);

// ---------------------------------------------------------------------------
// Gradient checking (per-op battery and composed pipeline)

struct GradCheckSummary {
    int checks = 0;
    int failures = 0;
    double worst_rel_err = 0;
    std::string worst_name;
};

// Finite-difference battery over every differentiable op at 64 bit.
GradCheckSummary run_op_grad_checks(int num_seeds, std::ostream* log = nullptr);

// image -> total loss through a tiny model at 64 bit; checks a random subset
// of image pixels and parameters of every module.
GradCheckSummary run_pipeline_grad_check(int num_seeds, std::ostream* log = nullptr);

}  // namespace e2eloc
