#include "e2eloc/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "e2eloc/image_io.hpp"

namespace e2eloc {

double compute_iou(const BBox& a, const BBox& b) {
    if (a.degenerate || b.degenerate) return 0.0;
    if (!(a.x1 > a.x0) || !(a.y1 > a.y0) || !(b.x1 > b.x0) || !(b.y1 > b.y0)) return 0.0;
    const double ix = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
    const double iy = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
    if (ix <= 0.0 || iy <= 0.0) return 0.0;
    const double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

void validate(const ExperimentConfig& cfg) {
    check(cfg.lr > 0 && cfg.lr_decay > 0, "config: learning rates must be positive");
    check(cfg.epochs >= 1 && cfg.batch_size >= 1, "config: epochs and batch size must be >= 1");
    check(cfg.lr_step_epochs >= 1 && cfg.epochs % cfg.lr_step_epochs == 0,
          "config: lr_step_epochs must divide epochs");
    check(cfg.beta_att >= 0 && cfg.beta_aff >= 0, "config: betas must be >= 0");
    check(cfg.lambda_att >= 0 && cfg.lambda_aff >= 0 && cfg.lambda_emb >= 0,
          "config: loss weights must be >= 0");
    check(cfg.momentum >= 0 && cfg.momentum < 1, "config: momentum must be in [0,1)");
    check(cfg.attnet.map_h == cfg.affnet.map_h && cfg.attnet.map_w == cfg.affnet.map_w,
          "config: AttNet and AffNet map sizes must agree");
    check(cfg.classifier.last_conv_size() == cfg.attnet.map_h,
          "config: classifier last-conv size must equal the attention map size");
    check(cfg.prep.tau > 0 && cfg.prep.tau < 1, "config: tau must be in (0,1)");
    check(cfg.ablation_reps >= 1, "config: ablation_reps must be >= 1");
}

// ---------------------------------------------------------------------------
// Config file and key=value binding

namespace {

struct Binder {
    const char* key;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

double parse_f(const std::string& v) {
    size_t pos = 0;
    double x = std::stod(v, &pos);
    check(pos == v.size(), "config: bad numeric value '" + v + "'");
    return x;
}

int parse_i(const std::string& v) {
    size_t pos = 0;
    long x = std::stol(v, &pos);
    check(pos == v.size(), "config: bad integer value '" + v + "'");
    return int(x);
}

uint64_t parse_u(const std::string& v) {
    size_t pos = 0;
    unsigned long long x = std::stoull(v, &pos);
    check(pos == v.size(), "config: bad seed value '" + v + "'");
    return uint64_t(x);
}

bool parse_b(const std::string& v) {
    if (v == "1" || v == "true" || v == "on") return true;
    if (v == "0" || v == "false" || v == "off") return false;
    throw std::invalid_argument("config: bad boolean value '" + v + "'");
}

std::string fmt_f(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

#define BIND_F(key, field) \
    {key, [](ExperimentConfig& c, const std::string& v) { c.field = parse_f(v); }, \
     [](const ExperimentConfig& c) { return fmt_f(c.field); }}
#define BIND_I(key, field) \
    {key, [](ExperimentConfig& c, const std::string& v) { c.field = parse_i(v); }, \
     [](const ExperimentConfig& c) { return std::to_string(c.field); }}
#define BIND_U(key, field) \
    {key, [](ExperimentConfig& c, const std::string& v) { c.field = parse_u(v); }, \
     [](const ExperimentConfig& c) { return std::to_string(c.field); }}
#define BIND_B(key, field) \
    {key, [](ExperimentConfig& c, const std::string& v) { c.field = parse_b(v); }, \
     [](const ExperimentConfig& c) { return c.field ? "true" : "false"; }}
#define BIND_S(key, field) \
    {key, [](ExperimentConfig& c, const std::string& v) { c.field = v; }, \
     [](const ExperimentConfig& c) { return c.field; }}

const std::vector<Binder>& binders() {
    static const std::vector<Binder> table = {
        BIND_F("lambda", lambda_emb),
        BIND_F("lambda_att", lambda_att),
        BIND_F("lambda_aff", lambda_aff),
        BIND_F("beta_att", beta_att),
        BIND_F("beta_aff", beta_aff),
        BIND_F("margin", margin),
        BIND_F("ema_decay", ema_decay),
        BIND_F("lr", lr),
        BIND_F("lr_decay", lr_decay),
        BIND_I("lr_step_epochs", lr_step_epochs),
        BIND_I("epochs", epochs),
        BIND_I("batch_size", batch_size),
        BIND_F("momentum", momentum),
        BIND_U("seed", seed),
        BIND_S("out_dir", out_dir),
        BIND_I("dump_crops", dump_crops),
        BIND_I("ablation_reps", ablation_reps),
        BIND_I("bench_epochs", bench_epochs),
        BIND_F("bench_lr", bench_lr),
        BIND_I("bench_batch", bench_batch),
        // preprocessing module
        {"tau",
         [](ExperimentConfig& c, const std::string& v) {
             c.prep.tau = parse_f(v);
             c.attn.tau = c.prep.tau;
         },
         [](const ExperimentConfig& c) { return fmt_f(c.prep.tau); }},
        BIND_F("steepness", prep.steepness),
        BIND_F("prep.epsilon", prep.epsilon),
        BIND_B("prep.zero_centered", prep.zero_centered),
        // attnet
        BIND_I("attnet.in_channels", attnet.in_channels),
        BIND_I("attnet.input_size", attnet.input_size),
        BIND_I("attnet.width1", attnet.width1),
        BIND_I("attnet.width2", attnet.width2),
        BIND_B("attnet.residual_block", attnet.residual_block),
        {"attnet.map_size",
         [](ExperimentConfig& c, const std::string& v) {
             c.attnet.map_h = c.attnet.map_w = parse_i(v);
             c.affnet.map_h = c.affnet.map_w = c.attnet.map_h;
         },
         [](const ExperimentConfig& c) { return std::to_string(c.attnet.map_h); }},
        BIND_I("affnet.hidden", affnet.hidden),
        // classifier
        BIND_I("classifier.input_size", classifier.input_size),
        BIND_I("classifier.embed_dim", classifier.embed_dim),
        {"classifier.widths",
         [](ExperimentConfig& c, const std::string& v) {
             c.classifier.widths.clear();
             std::stringstream ss(v);
             std::string tok;
             while (std::getline(ss, tok, ','))
                 if (!tok.empty()) c.classifier.widths.push_back(parse_i(tok));
             check(!c.classifier.widths.empty(), "config: classifier.widths is empty");
         },
         [](const ExperimentConfig& c) {
             std::string s;
             for (size_t i = 0; i < c.classifier.widths.size(); ++i)
                 s += (i ? "," : "") + std::to_string(c.classifier.widths[i]);
             return s;
         }},
        // glyph dataset
        BIND_I("glyph.image_size", glyph.image_size),
        BIND_I("glyph.num_classes", glyph.num_classes),
        BIND_F("glyph.min_frac", glyph.glyph_min_frac),
        BIND_F("glyph.max_frac", glyph.glyph_max_frac),
        BIND_I("glyph.clutter", glyph.clutter_count),
        BIND_F("glyph.noise", glyph.noise_sigma),
        BIND_I("glyph.train_count", glyph.train_count),
        BIND_I("glyph.test_count", glyph.test_count),
        BIND_U("glyph.seed", glyph.seed),
        // attention-map dataset
        {"attn.map_size",
         [](ExperimentConfig& c, const std::string& v) {
             c.attn.map_h = c.attn.map_w = parse_i(v);
         },
         [](const ExperimentConfig& c) { return std::to_string(c.attn.map_h); }},
        BIND_F("attn.noise", attn.noise_sigma),
        BIND_F("attn.min_box_frac", attn.min_box_frac),
        BIND_F("attn.max_box_frac", attn.max_box_frac),
        BIND_I("attn.train_count", attn.train_count),
        BIND_I("attn.test_count", attn.test_count),
        BIND_U("attn.seed", attn.seed),
    };
    return table;
}

#undef BIND_F
#undef BIND_I
#undef BIND_U
#undef BIND_B
#undef BIND_S

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    size_t b = s.find_last_not_of(" \t\r\n");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

}  // namespace

void apply_config_line(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& b : binders()) {
        if (key == b.key) {
            b.set(cfg, value);
            return;
        }
    }
    throw std::invalid_argument("config: unknown key '" + key + "'");
}

void load_config_file(ExperimentConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    check(bool(in), "config: cannot open " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        check(eq != std::string::npos,
              "config: missing '=' at " + path + ":" + std::to_string(lineno));
        apply_config_line(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& b : binders()) out.emplace_back(b.key, b.get(cfg));
    return out;
}

// ---------------------------------------------------------------------------
// Model assembly and training

std::vector<Tensor<float>> E2EModel::parameters() {
    auto out = loc.parameters();
    auto c = clf.parameters();
    out.insert(out.end(), c.begin(), c.end());
    return out;
}

std::vector<Tensor<float>> E2EModel::localization_parameters() { return loc.parameters(); }

std::vector<std::pair<std::string, Tensor<float>>> E2EModel::named_parameters() {
    std::vector<std::pair<std::string, Tensor<float>>> out;
    auto push = [&out](const std::string& name, Tensor<float> t) { out.emplace_back(name, t); };
    push("attnet.stem.w", loc.attnet.stem.w);
    push("attnet.stem.b", loc.attnet.stem.b);
    if (loc.attnet.cfg.residual_block) {
        push("attnet.res1.w", loc.attnet.res1.w);
        push("attnet.res1.b", loc.attnet.res1.b);
        push("attnet.res2.w", loc.attnet.res2.w);
        push("attnet.res2.b", loc.attnet.res2.b);
    }
    push("attnet.mid.w", loc.attnet.mid.w);
    push("attnet.mid.b", loc.attnet.mid.b);
    push("attnet.head.w", loc.attnet.head.w);
    push("attnet.head.b", loc.attnet.head.b);
    push("prep.w_tau", loc.prep.w_tau);
    push("affnet.h1.w", loc.affnet.h1.w);
    push("affnet.h1.b", loc.affnet.h1.b);
    push("affnet.h2.w", loc.affnet.h2.w);
    push("affnet.h2.b", loc.affnet.h2.b);
    push("affnet.v1.w", loc.affnet.v1.w);
    push("affnet.v1.b", loc.affnet.v1.b);
    push("affnet.v2.w", loc.affnet.v2.w);
    push("affnet.v2.b", loc.affnet.v2.b);
    for (size_t i = 0; i < clf.convs.size(); ++i) {
        push("classifier.conv" + std::to_string(i) + ".w", clf.convs[i].w);
        push("classifier.conv" + std::to_string(i) + ".b", clf.convs[i].b);
    }
    push("classifier.embed.w", clf.embed.w);
    push("classifier.embed.b", clf.embed.b);
    push("classifier.logits.w", clf.logits_layer.w);
    push("classifier.logits.b", clf.logits_layer.b);
    return out;
}

E2EModel build_model(const ExperimentConfig& cfg) {
    validate(cfg);
    Rng rng(stream_seed(cfg.seed, 0x10de1));
    PreprocessConfig pc = cfg.prep;
    E2EModel m{Localizer<float>(cfg.attnet, pc, cfg.affnet, cfg.classifier.input_size, rng),
               Classifier<float>(cfg.classifier, rng),
               ClassCenters<float>(cfg.classifier.num_classes, cfg.classifier.embed_dim,
                                   float(cfg.ema_decay))};
    return m;
}

namespace {

// Flattens a batch of samples into (B,1,S,S) leaf values.
std::vector<float> batch_images(const std::vector<GlyphSample>& set,
                                const std::vector<int>& order, int begin, int count,
                                size_t pixels) {
    std::vector<float> out(size_t(count) * pixels);
    for (int k = 0; k < count; ++k) {
        const auto& img = set[size_t(order[size_t(begin + k)])].image;
        for (size_t i = 0; i < pixels; ++i) out[size_t(k) * pixels + i] = float(img[i]);
    }
    return out;
}

int argmax_row(const float* row, int k) {
    int best = 0;
    for (int i = 1; i < k; ++i)
        if (row[i] > row[best]) best = i;
    return best;
}

uint64_t hash_order(const std::vector<int>& order) {
    uint64_t h = 1469598103934665603ull;
    for (int v : order) {
        h ^= uint64_t(v) + 0x9e3779b97f4a7c15ull;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace

std::vector<int> epoch_permutation(uint64_t seed, int epoch, int n) {
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[size_t(i)] = i;
    Rng rng(stream_seed(seed ^ 0xda7a0deull, uint64_t(epoch)));
    rng.shuffle(order);
    return order;
}

StepStats train_step(const ExperimentConfig& cfg, E2EModel& model, SgdMomentum<float>& opt,
                     double lr, const std::vector<float>& images, const std::vector<int>& labels,
                     int batch) {
    const int S = cfg.classifier.input_size;
    Tape<float> tape;
    auto x = tape.leaf({batch, 1, S, S}, images, false);
    auto lo = model.loc.forward(x, float(cfg.beta_att), float(cfg.beta_aff));
    auto out = model.clf.forward(lo.crop);

    // supervision targets, detached
    auto M = mean_feature_map(out.last_conv);
    auto theta_tau = theta_tensor<float>(batch_theta_targets(M, cfg.prep.tau));

    auto ce = softmax_cross_entropy(out.logits, labels);
    auto emb = loss_emb(out.embedding, labels, model.centers, float(cfg.margin));
    auto att = loss_att(lo.attention, M, float(cfg.lambda_att));
    auto aff = loss_aff(lo.theta, theta_tau, float(cfg.lambda_aff));
    auto loss = total_loss(ce, emb, att, aff, float(cfg.lambda_emb));

    StepStats st;
    st.loss = loss.item();
    st.ce = ce.item();
    st.emb = emb.item();
    st.att = att.item();
    st.aff = aff.item();
    if (!std::isfinite(st.loss)) {
        std::ostringstream os;
        os << "train_step: non-finite loss (ce=" << st.ce << " emb=" << st.emb
           << " att=" << st.att << " aff=" << st.aff
           << " constant_maps=" << Preprocess<float>::count_constant_maps(lo.attention) << ")";
        throw std::runtime_error(os.str());
    }

    for (int b = 0; b < batch; ++b)
        if (argmax_row(out.logits.data() + size_t(b) * cfg.classifier.num_classes,
                       cfg.classifier.num_classes) == labels[size_t(b)])
            ++st.correct;

    opt.zero_grad();
    tape.backward(loss);
    opt.step(float(lr));
    model.centers.update(out.embedding.values(), labels);
    return st;
}

EvalResult evaluate(const ExperimentConfig& cfg, E2EModel& model,
                    const std::vector<GlyphSample>& test_set) {
    const int S = cfg.classifier.input_size;
    const size_t pixels = size_t(S) * S;
    const int n = int(test_set.size());
    EvalResult res;
    double iou_sum = 0.0;
    int correct = 0;
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[size_t(i)] = i;
    for (int begin = 0; begin < n; begin += cfg.batch_size) {
        const int b = std::min(cfg.batch_size, n - begin);
        auto imgs = batch_images(test_set, order, begin, b, pixels);
        auto x = Tensor<float>::constant({b, 1, S, S}, std::move(imgs));
        auto lo = model.loc.forward(x, 0.f, 0.f);
        auto out = model.clf.forward(lo.crop);
        for (int k = 0; k < b; ++k) {
            const auto& sample = test_set[size_t(begin + k)];
            if (argmax_row(out.logits.data() + size_t(k) * cfg.classifier.num_classes,
                           cfg.classifier.num_classes) == sample.label)
                ++correct;
            ThetaParams th;
            th.s_x = lo.theta.values()[size_t(k) * 4 + 0];
            th.s_y = lo.theta.values()[size_t(k) * 4 + 1];
            th.t_x = lo.theta.values()[size_t(k) * 4 + 2];
            th.t_y = lo.theta.values()[size_t(k) * 4 + 3];
            iou_sum += compute_iou(clip_box(theta_to_bbox(th)), sample.box);
        }
    }
    res.accuracy = double(correct) / n;
    res.mean_iou = iou_sum / n;
    return res;
}

TrainOutput train_e2e(const ExperimentConfig& cfg, E2EModel& model,
                      const std::vector<GlyphSample>& train_set,
                      const std::vector<GlyphSample>& test_set, std::ostream* log) {
    validate(cfg);
    check(!train_set.empty() && !test_set.empty(), "train_e2e: empty dataset");
    const int S = cfg.classifier.input_size;
    check(cfg.glyph.image_size == S, "train_e2e: dataset image size must match classifier input");
    const size_t pixels = size_t(S) * S;
    const int n = int(train_set.size());

    SgdMomentum<float> opt(model.parameters(), float(cfg.momentum));
    TrainOutput out;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.lr * std::pow(cfg.lr_decay, epoch / cfg.lr_step_epochs);
        auto order = epoch_permutation(cfg.seed, epoch, n);
        EpochRow row;
        row.epoch = epoch;
        row.lr = lr;
        int correct = 0, seen = 0, steps = 0;
        for (int begin = 0; begin + 1 <= n; begin += cfg.batch_size) {
            const int b = std::min(cfg.batch_size, n - begin);
            auto imgs = batch_images(train_set, order, begin, b, pixels);
            std::vector<int> labels(static_cast<size_t>(b));
            for (int k = 0; k < b; ++k)
                labels[size_t(k)] = train_set[size_t(order[size_t(begin + k)])].label;
            StepStats st;
            try {
                st = train_step(cfg, model, opt, lr, imgs, labels, b);
            } catch (const std::exception& e) {
                // dump the offending batch for diagnosis, then re-throw
                if (!cfg.out_dir.empty()) {
                    std::filesystem::create_directories(cfg.out_dir);
                    std::ofstream dump(std::filesystem::path(cfg.out_dir) / "nan_dump.txt");
                    dump << "epoch " << epoch << " step " << steps << "\n" << e.what() << "\n";
                    dump << "batch indices:";
                    for (int k = 0; k < b; ++k) dump << " " << order[size_t(begin + k)];
                    dump << "\n";
                }
                throw;
            }
            row.loss += st.loss;
            row.ce += st.ce;
            row.emb += st.emb;
            row.att += st.att;
            row.aff += st.aff;
            correct += st.correct;
            seen += b;
            ++steps;
        }
        row.loss /= steps;
        row.ce /= steps;
        row.emb /= steps;
        row.att /= steps;
        row.aff /= steps;
        row.train_acc = double(correct) / seen;
        auto ev = evaluate(cfg, model, test_set);
        row.test_acc = ev.accuracy;
        row.mean_iou = ev.mean_iou;
        out.history.push_back(row);
        out.final_eval = ev;
        if (log)
            *log << "epoch " << epoch << " lr " << lr << " loss " << row.loss << " train_acc "
                 << row.train_acc << " test_acc " << row.test_acc << " iou " << row.mean_iou
                 << "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::string csv_f(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void write_metrics_csv(const std::vector<EpochRow>& history, const std::string& path) {
    std::ofstream out(path);
    check(bool(out), "write_metrics_csv: cannot open " + path);
    out << "epoch,lr,loss,ce,emb,att,aff,train_acc,test_acc,mean_iou\n";
    for (const auto& r : history)
        out << r.epoch << ',' << csv_f(r.lr) << ',' << csv_f(r.loss) << ',' << csv_f(r.ce) << ','
            << csv_f(r.emb) << ',' << csv_f(r.att) << ',' << csv_f(r.aff) << ','
            << csv_f(r.train_acc) << ',' << csv_f(r.test_acc) << ',' << csv_f(r.mean_iou)
            << '\n';
    check(bool(out), "write_metrics_csv: write failed");
}

std::vector<EpochRow> read_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    check(bool(in), "read_metrics_csv: cannot open " + path);
    std::string line;
    std::getline(in, line);  // header
    std::vector<EpochRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::vector<std::string> toks;
        while (std::getline(ss, tok, ',')) toks.push_back(tok);
        check(toks.size() == 10, "read_metrics_csv: bad row in " + path);
        EpochRow r;
        r.epoch = parse_i(toks[0]);
        r.lr = parse_f(toks[1]);
        r.loss = parse_f(toks[2]);
        r.ce = parse_f(toks[3]);
        r.emb = parse_f(toks[4]);
        r.att = parse_f(toks[5]);
        r.aff = parse_f(toks[6]);
        r.train_acc = parse_f(toks[7]);
        r.test_acc = parse_f(toks[8]);
        r.mean_iou = parse_f(toks[9]);
        rows.push_back(r);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Affine-estimator benchmark

namespace {

struct Estimator {
    virtual ~Estimator() = default;
    virtual Tensor<float> forward(const Tensor<float>& maps) const = 0;
    virtual void collect(std::vector<Tensor<float>>& out) = 0;
};

// flatten -> linear(32) -> ReLU -> linear(4)
struct FfnnEstimator : Estimator {
    LinearLayer<float> l1, l2;
    FfnnEstimator(int map_h, int map_w, Rng& rng)
        : l1(map_h * map_w, 32, rng), l2(32, 4, rng) {}
    Tensor<float> forward(const Tensor<float>& maps) const override {
        return l2(relu(l1(flatten2d(maps))));
    }
    void collect(std::vector<Tensor<float>>& out) override {
        l1.collect(out);
        l2.collect(out);
    }
};

// conv stem with one residual block and a strided conv, flattened into the
// four-way output layer; the shortened-backbone baseline. Flattening (not
// global pooling) keeps the spatial layout the box regression needs.
struct ConvSEstimator : Estimator {
    Conv2dLayer<float> stem, res1, res2, down;
    LinearLayer<float> head;
    ConvSEstimator(int map_h, int map_w, Rng& rng)
        : stem(1, 16, 3, 1, 1, rng),
          res1(16, 16, 3, 1, 1, rng),
          res2(16, 16, 3, 1, 1, rng),
          down(16, 32, 3, 2, 1, rng),
          head(32 * ((map_h + 1) / 2) * ((map_w + 1) / 2), 4, rng) {}
    Tensor<float> forward(const Tensor<float>& maps) const override {
        auto h = relu(stem(maps));
        h = relu(add(h, res2(relu(res1(h)))));
        h = relu(down(h));
        return head(flatten2d(h));
    }
    void collect(std::vector<Tensor<float>>& out) override {
        stem.collect(out);
        res1.collect(out);
        res2.collect(out);
        down.collect(out);
        head.collect(out);
    }
};

struct AffnetEstimator : Estimator {
    AffNet<float> net;
    AffnetEstimator(const AffNetConfig& cfg, Rng& rng) : net(cfg, rng) {}
    Tensor<float> forward(const Tensor<float>& maps) const override { return net.forward(maps); }
    void collect(std::vector<Tensor<float>>& out) override { net.collect(out); }
};

struct BenchModel {
    std::unique_ptr<Estimator> est;
    std::unique_ptr<Preprocess<float>> prep;

    Tensor<float> forward(const Tensor<float>& maps) const {
        return est->forward(prep ? prep->forward(maps) : maps);
    }
    std::vector<Tensor<float>> parameters() {
        std::vector<Tensor<float>> out;
        if (prep) prep->collect(out);
        est->collect(out);
        return out;
    }
};

BenchModel make_bench_model(const std::string& arch, bool with_prep,
                            const ExperimentConfig& cfg, Rng& rng) {
    BenchModel m;
    if (with_prep) m.prep = std::make_unique<Preprocess<float>>(cfg.prep);
    if (arch == "ffnn")
        m.est = std::make_unique<FfnnEstimator>(cfg.attn.map_h, cfg.attn.map_w, rng);
    else if (arch == "conv-s")
        m.est = std::make_unique<ConvSEstimator>(cfg.attn.map_h, cfg.attn.map_w, rng);
    else if (arch == "affnet") {
        AffNetConfig fc = cfg.affnet;
        fc.map_h = cfg.attn.map_h;
        fc.map_w = cfg.attn.map_w;
        m.est = std::make_unique<AffnetEstimator>(fc, rng);
    } else
        throw std::invalid_argument("unknown estimator architecture " + arch);
    return m;
}

std::vector<float> attn_batch(const std::vector<AttnSample>& set, const std::vector<int>& order,
                              int begin, int count, size_t cells) {
    std::vector<float> out(size_t(count) * cells);
    for (int k = 0; k < count; ++k) {
        const auto& map = set[size_t(order[size_t(begin + k)])].map;
        for (size_t i = 0; i < cells; ++i) out[size_t(k) * cells + i] = float(map[i]);
    }
    return out;
}

std::vector<float> attn_targets(const std::vector<AttnSample>& set, const std::vector<int>& order,
                                int begin, int count) {
    std::vector<float> out(size_t(count) * 4);
    for (int k = 0; k < count; ++k) {
        const auto& th = set[size_t(order[size_t(begin + k)])].theta;
        out[size_t(k) * 4 + 0] = float(th.s_x);
        out[size_t(k) * 4 + 1] = float(th.s_y);
        out[size_t(k) * 4 + 2] = float(th.t_x);
        out[size_t(k) * 4 + 3] = float(th.t_y);
    }
    return out;
}

}  // namespace

std::vector<MetricsRow> run_affnet_bench(const ExperimentConfig& cfg, std::ostream* log) {
    const int I = cfg.attn.map_h, J = cfg.attn.map_w;
    const size_t cells = size_t(I) * J;
    auto train = gen_attention_dataset(cfg.attn, Split::kTrain);
    auto test = gen_attention_dataset(cfg.attn, Split::kTest);
    const int n = int(train.size());

    std::vector<MetricsRow> rows;
    const std::vector<std::string> archs = {"ffnn", "conv-s", "affnet"};
    int row_idx = 0;
    for (const auto& arch : archs) {
        for (bool with_prep : {false, true}) {
            Rng rng(stream_seed(cfg.seed, 0xbe9c4 + uint64_t(row_idx)));
            BenchModel model = make_bench_model(arch, with_prep, cfg, rng);
            SgdMomentum<float> opt(model.parameters(), float(cfg.momentum));
            for (int epoch = 0; epoch < cfg.bench_epochs; ++epoch) {
                auto order = epoch_permutation(cfg.seed ^ 0xbe9c4, epoch, n);
                for (int begin = 0; begin < n; begin += cfg.bench_batch) {
                    const int b = std::min(cfg.bench_batch, n - begin);
                    Tape<float> tape;
                    auto maps = tape.leaf({b, 1, I, J}, attn_batch(train, order, begin, b, cells),
                                          false);
                    auto target =
                        Tensor<float>::constant({b, 4}, attn_targets(train, order, begin, b));
                    auto pred = model.forward(maps);
                    auto loss = smooth_l1(pred, target);
                    if (!std::isfinite(double(loss.item())))
                        throw std::runtime_error("run_affnet_bench: non-finite loss");
                    opt.zero_grad();
                    tape.backward(loss);
                    opt.step(float(cfg.bench_lr));
                }
            }

            MetricsRow row;
            row.network = arch;
            row.prep = with_prep;
            row.param_count = count_params(model.parameters());

            // test metrics in one pass
            {
                std::vector<int> order(test.size());
                for (size_t i = 0; i < test.size(); ++i) order[i] = int(i);
                const int tn = int(test.size());
                auto maps = Tensor<float>::constant({tn, 1, I, J},
                                                    attn_batch(test, order, 0, tn, cells));
                auto target = Tensor<float>::constant({tn, 4}, attn_targets(test, order, 0, tn));
                auto pred = model.forward(maps);
                row.sl1_error = smooth_l1(pred, target).item();
                int hits80 = 0, hits95 = 0;
                double iou_sum = 0;
                for (int k = 0; k < tn; ++k) {
                    ThetaParams th;
                    th.s_x = pred.values()[size_t(k) * 4 + 0];
                    th.s_y = pred.values()[size_t(k) * 4 + 1];
                    th.t_x = pred.values()[size_t(k) * 4 + 2];
                    th.t_y = pred.values()[size_t(k) * 4 + 3];
                    const double iou =
                        compute_iou(clip_box(theta_to_bbox(th)), test[size_t(k)].box);
                    iou_sum += iou;
                    if (iou > 0.8) ++hits80;
                    if (iou > 0.95) ++hits95;
                }
                row.iou80 = double(hits80) / tn;
                row.iou95 = double(hits95) / tn;
                row.mean_iou = iou_sum / tn;
            }

            // median single-map forward time, warmed up
            {
                std::vector<int> order(1, 0);
                auto one = Tensor<float>::constant({1, 1, I, J}, attn_batch(test, order, 0, 1, cells));
                for (int i = 0; i < 10; ++i) (void)model.forward(one);
                std::vector<double> times;
                times.reserve(100);
                for (int i = 0; i < 100; ++i) {
                    const auto t0 = std::chrono::steady_clock::now();
                    (void)model.forward(one);
                    const auto t1 = std::chrono::steady_clock::now();
                    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
                }
                std::sort(times.begin(), times.end());
                row.runtime_ms = times[times.size() / 2];
            }

            rows.push_back(row);
            if (log)
                *log << arch << (with_prep ? "+prep" : "") << ": params " << row.param_count
                     << " sl1 " << row.sl1_error << " iou>0.8 " << row.iou80 << " iou>0.95 "
                     << row.iou95 << " runtime_ms " << row.runtime_ms << "\n";
            ++row_idx;
        }
    }
    return rows;
}

void write_table1_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
    std::ofstream out(path);
    check(bool(out), "write_table1_csv: cannot open " + path);
    out << "network,prep,parameters,runtime_ms,sl1_error,iou_gt_0.8,iou_gt_0.95,mean_iou\n";
    for (const auto& r : rows)
        out << r.network << ',' << (r.prep ? 1 : 0) << ',' << r.param_count << ','
            << csv_f(r.runtime_ms) << ',' << csv_f(r.sl1_error) << ',' << csv_f(r.iou80) << ','
            << csv_f(r.iou95) << ',' << csv_f(r.mean_iou) << '\n';
}

// ---------------------------------------------------------------------------
// Ablation

std::vector<AblationRowSpec> ablation_rows() {
    return {
        {"baseline", false, 0, 0},
        {"no-local-supervision", false, 1, 1},
        {"no-end-to-end", true, 0, 0},
        {"no-affnet-to-attnet-gradient", true, 0, 1},
        {"end-to-end", true, 1, 1},
    };
}

std::vector<AblationResult> run_ablation(const ExperimentConfig& cfg, std::ostream* log) {
    validate(cfg);
    std::vector<AblationResult> results;
    for (const auto& spec : ablation_rows()) {
        AblationResult r;
        r.spec = spec;
        results.push_back(r);
    }
    for (int rep = 0; rep < cfg.ablation_reps; ++rep) {
        GlyphDatasetConfig gcfg = cfg.glyph;
        gcfg.seed = cfg.glyph.seed + uint64_t(rep);
        auto train = gen_glyph_dataset(gcfg, Split::kTrain);
        auto test = gen_glyph_dataset(gcfg, Split::kTest);
        for (size_t ri = 0; ri < results.size(); ++ri) {
            const auto& spec = results[ri].spec;
            ExperimentConfig run_cfg = cfg;
            run_cfg.lambda_att = spec.local_losses ? cfg.lambda_att : 0.0;
            run_cfg.lambda_aff = spec.local_losses ? cfg.lambda_aff : 0.0;
            run_cfg.beta_att = spec.beta_att;
            run_cfg.beta_aff = spec.beta_aff;
            run_cfg.seed = cfg.seed + uint64_t(rep);
            run_cfg.glyph = gcfg;
            run_cfg.out_dir = cfg.out_dir;
            E2EModel model = build_model(run_cfg);
            auto out = train_e2e(run_cfg, model, train, test, nullptr);
            results[ri].accuracies.push_back(out.final_eval.accuracy);
            const uint64_t order_hash =
                hash_order(epoch_permutation(run_cfg.seed, 0, int(train.size())));
            if (rep == 0) results[ri].data_order_hash = order_hash;
            check(results[ri].data_order_hash == order_hash ||
                      rep > 0,  // hash varies across reps, not across rows
                  "run_ablation: data order drifted");
            if (log)
                *log << spec.name << " rep " << rep << ": acc " << out.final_eval.accuracy
                     << " iou " << out.final_eval.mean_iou << "\n";
        }
        // paired-seed invariant: identical data order across the five rows
        const uint64_t h0 = hash_order(epoch_permutation(cfg.seed + uint64_t(rep), 0,
                                                         int(train.size())));
        for (auto& r : results)
            check(rep > 0 || r.data_order_hash == h0, "run_ablation: rows saw different orders");
    }
    for (auto& r : results) {
        double s = 0;
        for (double a : r.accuracies) s += a;
        r.mean_accuracy = s / double(r.accuracies.size());
    }
    return results;
}

void write_table2_csv(const std::vector<AblationResult>& rows, const std::string& path) {
    std::ofstream out(path);
    check(bool(out), "write_table2_csv: cannot open " + path);
    out << "description,local_losses,beta_att,beta_aff";
    if (!rows.empty())
        for (size_t i = 0; i < rows[0].accuracies.size(); ++i) out << ",acc_rep" << i;
    out << ",mean_acc\n";
    for (const auto& r : rows) {
        out << r.spec.name << ',' << (r.spec.local_losses ? 1 : 0) << ','
            << csv_f(r.spec.beta_att) << ',' << csv_f(r.spec.beta_aff);
        for (double a : r.accuracies) out << ',' << csv_f(a);
        out << ',' << csv_f(r.mean_accuracy) << '\n';
    }
}

}  // namespace e2eloc
