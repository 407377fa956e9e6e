// Command line front end: data generation, end-to-end training, the two
// benchmark runners, checkpoint evaluation and gradient checking.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "e2eloc/checkpoint.hpp"
#include "e2eloc/harness.hpp"
#include "e2eloc/image_io.hpp"

namespace fs = std::filesystem;
using namespace e2eloc;

namespace {

// Every config key doubles as a long option (--lr 0.01, --glyph.train_count 500).
void add_config_options(CLI::App* cmd, ExperimentConfig& cfg) {
    for (const auto& [key, value] : config_entries(cfg)) {
        const std::string name = "--" + key;
        const std::string k = key;
        cmd->add_option_function<std::string>(
               name, [&cfg, k](const std::string& v) { apply_config_line(cfg, k, v); })
            ->default_str(value);
    }
}

// --config must apply before the explicit flags, so it is pulled out of argv
// ahead of CLI11 parsing.
void preload_config_file(int argc, char** argv, ExperimentConfig& cfg) {
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--config") load_config_file(cfg, argv[i + 1]);
}

void write_resolved_config(const ExperimentConfig& cfg, const fs::path& path) {
    std::ofstream out(path);
    for (const auto& [k, v] : config_entries(cfg)) out << k << " = " << v << "\n";
}

void dump_crop_visualizations(const ExperimentConfig& cfg, E2EModel& model,
                              const std::vector<GlyphSample>& test_set, int count,
                              const fs::path& dir) {
    fs::create_directories(dir);
    const int S = cfg.classifier.input_size;
    const int n = std::min<int>(count, int(test_set.size()));
    for (int i = 0; i < n; ++i) {
        std::vector<float> img(test_set[size_t(i)].image.begin(), test_set[size_t(i)].image.end());
        auto x = Tensor<float>::constant({1, 1, S, S}, std::move(img));
        auto lo = model.loc.forward(x, 0.f, 0.f);
        char name[64];
        std::snprintf(name, sizeof(name), "input_%03d.pgm", i);
        write_pgm((dir / name).string(), test_set[size_t(i)].image, S, S, 255);
        std::snprintf(name, sizeof(name), "crop_%03d.pgm", i);
        std::vector<double> crop(lo.crop.values().begin(), lo.crop.values().end());
        write_pgm((dir / name).string(), crop, S, S, 255);
        std::snprintf(name, sizeof(name), "attention_%03d.pgm", i);
        auto& av = lo.attention.values();
        double mn = av[0], mx = av[0];
        for (float v : av) {
            mn = std::min(mn, double(v));
            mx = std::max(mx, double(v));
        }
        std::vector<double> att(av.size());
        for (size_t k = 0; k < av.size(); ++k)
            att[k] = mx > mn ? (av[k] - mn) / (mx - mn) : 0.0;
        write_pgm((dir / name).string(), att, cfg.attnet.map_h, cfg.attnet.map_w, 255);
    }
}

int cmd_gen_data(const ExperimentConfig& cfg, const std::string& kind) {
    validate(cfg);
    fs::create_directories(cfg.out_dir);
    if (kind == "glyph" || kind == "both") {
        auto train = gen_glyph_dataset(cfg.glyph, Split::kTrain);
        auto test = gen_glyph_dataset(cfg.glyph, Split::kTest);
        dump_glyph_dataset(train, cfg.glyph.image_size, cfg.out_dir, "glyph_train");
        dump_glyph_dataset(test, cfg.glyph.image_size, cfg.out_dir, "glyph_test");
        std::cout << "glyph dataset: " << train.size() << " train / " << test.size()
                  << " test -> " << cfg.out_dir << "\n";
    }
    if (kind == "attention" || kind == "both") {
        auto train = gen_attention_dataset(cfg.attn, Split::kTrain);
        auto test = gen_attention_dataset(cfg.attn, Split::kTest);
        dump_attention_dataset(train, cfg.attn.map_h, cfg.attn.map_w, cfg.out_dir, "attn_train");
        dump_attention_dataset(test, cfg.attn.map_h, cfg.attn.map_w, cfg.out_dir, "attn_test");
        std::cout << "attention dataset: " << train.size() << " train / " << test.size()
                  << " test -> " << cfg.out_dir << "\n";
    }
    return 0;
}

int cmd_train(const ExperimentConfig& cfg) {
    validate(cfg);
    fs::create_directories(cfg.out_dir);
    auto train_set = gen_glyph_dataset(cfg.glyph, Split::kTrain);
    auto test_set = gen_glyph_dataset(cfg.glyph, Split::kTest);
    E2EModel model = build_model(cfg);
    std::cout << "training: " << train_set.size() << " train / " << test_set.size()
              << " test, " << count_params(model.parameters()) << " parameters\n";
    auto out = train_e2e(cfg, model, train_set, test_set, &std::cout);
    const fs::path dir(cfg.out_dir);
    write_metrics_csv(out.history, (dir / "metrics.csv").string());
    save_checkpoint((dir / "checkpoint.bin").string(), model, cfg);
    write_resolved_config(cfg, dir / "config.txt");
    if (cfg.dump_crops > 0)
        dump_crop_visualizations(cfg, model, test_set, cfg.dump_crops, dir / "crops");
    std::cout << "final test accuracy " << out.final_eval.accuracy << ", mean IoU "
              << out.final_eval.mean_iou << "\n";
    std::cout << "wrote " << (dir / "metrics.csv").string() << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint_path) {
    ExperimentConfig cfg;
    E2EModel model = load_checkpoint(checkpoint_path, &cfg);
    auto test_set = gen_glyph_dataset(cfg.glyph, Split::kTest);
    auto res = evaluate(cfg, model, test_set);
    std::cout << "test accuracy " << res.accuracy << ", mean IoU " << res.mean_iou << "\n";
    return 0;
}

int cmd_affnet_bench(const ExperimentConfig& cfg) {
    validate(cfg);
    fs::create_directories(cfg.out_dir);
    auto rows = run_affnet_bench(cfg, &std::cout);
    const auto path = fs::path(cfg.out_dir) / "table1.csv";
    write_table1_csv(rows, path.string());
    std::cout << "wrote " << path.string() << "\n";
    return 0;
}

int cmd_ablation(const ExperimentConfig& cfg) {
    validate(cfg);
    fs::create_directories(cfg.out_dir);
    auto rows = run_ablation(cfg, &std::cout);
    const auto path = fs::path(cfg.out_dir) / "table2.csv";
    write_table2_csv(rows, path.string());
    for (const auto& r : rows)
        std::cout << r.spec.name << ": mean accuracy " << r.mean_accuracy << "\n";
    std::cout << "wrote " << path.string() << "\n";
    return 0;
}

int cmd_grad_check(int seeds) {
    auto ops = run_op_grad_checks(seeds, &std::cout);
    auto pipe = run_pipeline_grad_check(seeds, &std::cout);
    const bool ok = ops.failures == 0 && pipe.failures == 0;
    std::cout << (ok ? "grad-check: PASS" : "grad-check: FAIL") << "\n";
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"end-to-end localization for fine-grained classification (desk scale)"};
    app.require_subcommand(1);

    ExperimentConfig cfg;
    try {
        preload_config_file(argc, argv, cfg);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    std::string config_path, kind = "both", checkpoint_path;
    int seeds = 20;

    auto* gen = app.add_subcommand("gen-data", "generate and dump the synthetic datasets");
    gen->add_option("--config", config_path, "key=value config file");
    gen->add_option("--kind", kind, "glyph | attention | both")->default_str("both");
    add_config_options(gen, cfg);

    auto* train = app.add_subcommand("train", "train the full model on the glyph dataset");
    train->add_option("--config", config_path, "key=value config file");
    add_config_options(train, cfg);

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a saved checkpoint");
    eval_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();

    auto* bench = app.add_subcommand("affnet-bench",
                                     "affine estimator comparison on the attention corpus");
    bench->add_option("--config", config_path, "key=value config file");
    add_config_options(bench, cfg);

    auto* abl = app.add_subcommand("ablation", "five-row gate/loss ablation with paired seeds");
    abl->add_option("--config", config_path, "key=value config file");
    add_config_options(abl, cfg);

    auto* gc = app.add_subcommand("grad-check", "finite-difference gradient verification");
    gc->add_option("--seeds", seeds, "number of random seeds")->default_val(20);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(cfg, kind);
        if (train->parsed()) return cmd_train(cfg);
        if (eval_cmd->parsed()) return cmd_eval(checkpoint_path);
        if (bench->parsed()) return cmd_affnet_bench(cfg);
        if (abl->parsed()) return cmd_ablation(cfg);
        if (gc->parsed()) return cmd_grad_check(seeds);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
