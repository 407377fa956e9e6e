#include <cmath>
#include <ostream>

#include "e2eloc/classifier.hpp"
#include "e2eloc/gradcheck.hpp"
#include "e2eloc/harness.hpp"
#include "e2eloc/localization.hpp"
#include "e2eloc/supervision.hpp"

// Finite-difference batteries behind the grad-check command and the
// gradient-fidelity acceptance criterion. Everything here runs in double.

namespace e2eloc {

namespace {

using fdcheck::GradCheckOptions;
using fdcheck::grad_check;
using fdcheck::LeafSpec;
using fdcheck::rand_vec;
using fdcheck::rand_vec_distinct;
using fdcheck::rand_vec_signed;

void note(GradCheckSummary& sum, const char* name, double err, double tol,
          std::ostream* log) {
    ++sum.checks;
    if (err > sum.worst_rel_err) {
        sum.worst_rel_err = err;
        sum.worst_name = name;
    }
    if (err >= tol) {
        ++sum.failures;
        if (log) *log << "  FAIL " << name << " rel_err " << err << "\n";
    }
}

}  // namespace

GradCheckSummary run_op_grad_checks(int num_seeds, std::ostream* log) {
    GradCheckSummary sum;
    const double tol = 1e-4;
    for (int s = 0; s < num_seeds; ++s) {
        Rng rng(stream_seed(0x9cadc4ecull, uint64_t(s)));
        GradCheckOptions guard;
        guard.kink_guard = true;

        auto unary = [&](const char* name, auto fn, std::vector<double> vals, Shape sh) {
            std::vector<LeafSpec> leaves{{sh, std::move(vals)}};
            auto rep = grad_check(
                leaves,
                [&](Tape<double>&, std::vector<Tensor<double>>& ts) { return fn(ts[0]); }, rng,
                guard);
            note(sum, name, rep.max_rel_err, tol, log);
        };
        const Shape sh{2, 8};
        const size_t n = 16;
        auto sq_mean = [](const Tensor<double>& t) { return mean_all(mul(t, t)); };

        unary("relu", [&](const Tensor<double>& t) { return mean_all(relu(t)); },
              rand_vec_signed(rng, n), sh);
        unary("sigmoid", [&](const Tensor<double>& t) { return mean_all(sigmoid(t)); },
              rand_vec(rng, n, -2, 2), sh);
        unary("add_scalar", [&](const Tensor<double>& t) { return mean_all(add_scalar(t, 0.37)); },
              rand_vec(rng, n, -1, 1), sh);
        unary("mul_scalar", [&](const Tensor<double>& t) { return mean_all(mul_scalar(t, -1.7)); },
              rand_vec(rng, n, -1, 1), sh);
        unary("sum_all", [&](const Tensor<double>& t) { return sum_all(mul(t, t)); },
              rand_vec(rng, n, -1, 1), sh);
        unary("mean_all", sq_mean, rand_vec(rng, n, -1, 1), sh);
        unary("min_all", [&](const Tensor<double>& t) { return min_all(t); },
              rand_vec_distinct(rng, n, -1, 1), sh);
        unary("max_all", [&](const Tensor<double>& t) { return max_all(t); },
              rand_vec_distinct(rng, n, -1, 1), sh);
        unary("min_per_sample",
              [&](const Tensor<double>& t) { return sum_all(min_per_sample(t)); },
              rand_vec_distinct(rng, n, -1, 1), sh);
        unary("max_per_sample",
              [&](const Tensor<double>& t) { return sum_all(max_per_sample(t)); },
              rand_vec_distinct(rng, n, -1, 1), sh);
        unary("reshape", [&](const Tensor<double>& t) { return sq_mean(reshape(t, {4, 4})); },
              rand_vec(rng, n, -1, 1), sh);
        unary("flatten2d", [&](const Tensor<double>& t) { return sq_mean(flatten2d(t)); },
              rand_vec(rng, n, -1, 1), sh);
        unary("grad_scale(beta=1)",
              [&](const Tensor<double>& t) { return mean_all(grad_scale(t, 1.0)); },
              rand_vec(rng, n, -1, 1), sh);
        unary("channel_mean",
              [&](const Tensor<double>& t) { return sq_mean(channel_mean(t)); },
              rand_vec(rng, 24, -1, 1), Shape{2, 3, 2, 2});
        unary("maxpool2x2", [&](const Tensor<double>& t) { return sq_mean(maxpool2x2(t)); },
              rand_vec_distinct(rng, 32, -1, 1), Shape{1, 2, 4, 4});
        unary("gap2d", [&](const Tensor<double>& t) { return sq_mean(gap2d(t)); },
              rand_vec(rng, 32, -1, 1), Shape{1, 2, 4, 4});
        unary("directional_max_pool",
              [&](const Tensor<double>& t) {
                  auto v = directional_max_pool(t, PoolAxis::kVertical);
                  auto h = directional_max_pool(t, PoolAxis::kHorizontal);
                  return add(sq_mean(v), sq_mean(h));
              },
              rand_vec_distinct(rng, 30, -1, 1), Shape{1, 1, 5, 6});
        unary("resize_bilinear",
              [&](const Tensor<double>& t) { return sq_mean(resize_bilinear(t, 3, 4)); },
              rand_vec(rng, 30, 0, 1), Shape{1, 1, 5, 6});
        unary("resize_nearest",
              [&](const Tensor<double>& t) { return sq_mean(resize_nearest(t, 3, 4)); },
              rand_vec(rng, 30, 0, 1), Shape{1, 1, 5, 6});
        unary("softmax_cross_entropy",
              [&](const Tensor<double>& t) {
                  return softmax_cross_entropy(t, std::vector<int>{1, 0});
              },
              rand_vec(rng, 10, -2, 2), Shape{2, 5});
        unary("smooth_l1",
              [&](const Tensor<double>& t) {
                  return smooth_l1(t, Tensor<double>::zeros({2, 8}));
              },
              rand_vec_signed(rng, n, 0.1, 2.5), sh);

        auto binary = [&](const char* name, auto fn, std::vector<double> a,
                          std::vector<double> b, Shape sa, Shape sb) {
            std::vector<LeafSpec> leaves{{sa, std::move(a)}, {sb, std::move(b)}};
            auto rep = grad_check(
                leaves,
                [&](Tape<double>&, std::vector<Tensor<double>>& ts) {
                    return fn(ts[0], ts[1]);
                },
                rng, guard);
            note(sum, name, rep.max_rel_err, tol, log);
        };
        binary("add", [&](auto& a, auto& b) { return sq_mean(add(a, b)); },
               rand_vec(rng, n, -1, 1), rand_vec(rng, n, -1, 1), sh, sh);
        binary("sub", [&](auto& a, auto& b) { return sq_mean(sub(a, b)); },
               rand_vec(rng, n, -1, 1), rand_vec(rng, n, -1, 1), sh, sh);
        binary("mul", [&](auto& a, auto& b) { return sq_mean(mul(a, b)); },
               rand_vec(rng, n, -1, 1), rand_vec(rng, n, -1, 1), sh, sh);
        binary("divide", [&](auto& a, auto& b) { return sq_mean(divide(a, b)); },
               rand_vec(rng, n, -1, 1), rand_vec_signed(rng, n, 0.5, 2.0), sh, sh);
        binary("sub_rowwise", [&](auto& a, auto& b) { return sq_mean(sub_rowwise(a, b)); },
               rand_vec(rng, n, -1, 1), rand_vec(rng, 2, -1, 1), sh, Shape{2});
        binary("div_rowwise", [&](auto& a, auto& b) { return sq_mean(div_rowwise(a, b)); },
               rand_vec(rng, n, -1, 1), rand_vec_signed(rng, 2, 0.5, 2.0), sh, Shape{2});
        binary("sub_broadcast_scalar",
               [&](auto& a, auto& b) { return sq_mean(sub_broadcast_scalar(a, b)); },
               rand_vec(rng, n, -1, 1), rand_vec(rng, 1, 0.1, 0.6), sh, Shape{1});
        binary("make_theta", [&](auto& a, auto& b) { return sq_mean(make_theta(a, b)); },
               rand_vec(rng, 4, -1, 1), rand_vec(rng, 4, -1, 1), Shape{2, 2}, Shape{2, 2});
        binary("bilinear_sample",
               [&](auto& img, auto& th) { return sq_mean(bilinear_sample(img, th, 4, 3)); },
               rand_vec(rng, 60, 0, 1),
               std::vector<double>{rng.uniform(0.45, 0.9), rng.uniform(0.45, 0.9),
                                   rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)},
               Shape{1, 2, 5, 6}, Shape{1, 4});

        // conv2d / linear: probe a subset, all three leaves
        {
            GradCheckOptions opt = guard;
            opt.probes_per_leaf = 12;
            for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 1}}) {
                std::vector<LeafSpec> leaves{{{1, 2, 5, 4}, rand_vec(rng, 40, -1, 1)},
                                             {{3, 2, 3, 3}, rand_vec(rng, 54, -1, 1)},
                                             {{3}, rand_vec(rng, 3, -0.5, 0.5)}};
                auto rep = grad_check(
                    leaves,
                    [&](Tape<double>&, std::vector<Tensor<double>>& ts) {
                        return sq_mean(conv2d(ts[0], ts[1], ts[2], stride, pad));
                    },
                    rng, opt);
                note(sum, stride == 1 ? "conv2d(s1)" : "conv2d(s2)", rep.max_rel_err, tol, log);
            }
            std::vector<LeafSpec> leaves{{{3, 5}, rand_vec(rng, 15, -1, 1)},
                                         {{4, 5}, rand_vec(rng, 20, -1, 1)},
                                         {{4}, rand_vec(rng, 4, -0.5, 0.5)}};
            auto rep = grad_check(
                leaves,
                [&](Tape<double>&, std::vector<Tensor<double>>& ts) {
                    return sq_mean(linear(ts[0], ts[1], ts[2]));
                },
                rng, opt);
            note(sum, "linear", rep.max_rel_err, tol, log);
        }
        // center_pull
        {
            std::vector<double> centers = rand_vec(rng, 9, -1, 1);
            std::vector<LeafSpec> leaves{{{2, 3}, rand_vec(rng, 6, -1, 1)}};
            auto rep = grad_check(
                leaves,
                [&](Tape<double>&, std::vector<Tensor<double>>& ts) {
                    return center_pull(ts[0], centers, std::vector<int>{2, 0}, 3);
                },
                rng, guard);
            note(sum, "center_pull", rep.max_rel_err, tol, log);
        }
        // preprocess as a composite (min/max, rowwise broadcast, relu, sigmoid)
        {
            Preprocess<double> prep{PreprocessConfig{}};
            std::vector<LeafSpec> leaves{{{2, 1, 4, 4}, rand_vec_distinct(rng, 32, 0, 1)}};
            auto rep = grad_check(
                leaves,
                [&](Tape<double>&, std::vector<Tensor<double>>& ts) {
                    auto p = prep.forward(ts[0]);
                    return mean_all(mul(p, p));
                },
                rng, guard);
            note(sum, "preprocess", rep.max_rel_err, tol, log);
        }
    }
    if (log)
        *log << "op grad checks: " << sum.checks << " checks, " << sum.failures
             << " failures, worst " << sum.worst_rel_err << " (" << sum.worst_name << ")\n";
    return sum;
}

GradCheckSummary run_pipeline_grad_check(int num_seeds, std::ostream* log) {
    GradCheckSummary sum;
    const double tol = 1e-3;
    const double denom_floor = 1e-4;
    const double h = 1e-5;

    for (int s = 0; s < num_seeds; ++s) {
        Rng rng(stream_seed(0x91e11eull, uint64_t(s)));

        AttNetConfig ac;
        ac.in_channels = 1;
        ac.input_size = 16;
        ac.width1 = 3;
        ac.width2 = 4;
        ac.residual_block = true;
        ac.map_h = ac.map_w = 4;
        ClassifierConfig cc;
        cc.in_channels = 1;
        cc.input_size = 16;
        cc.widths = {3, 4, 5};
        cc.embed_dim = 4;
        cc.num_classes = 3;
        AffNetConfig fc;
        fc.map_h = fc.map_w = 4;
        fc.hidden = 8;
        PreprocessConfig pc;

        Localizer<double> loc(ac, pc, fc, cc.input_size, rng);
        Classifier<double> clf(cc, rng);
        // keep theta away from the exact identity: at the identity the
        // sampling grid sits on pixel centers where the interpolant kinks
        loc.affnet.h2.b.values() = {rng.uniform(0.55, 0.85), rng.uniform(-0.15, 0.15)};
        loc.affnet.v2.b.values() = {rng.uniform(0.55, 0.85), rng.uniform(-0.15, 0.15)};

        const int B = 2;
        std::vector<double> image = rand_vec(rng, size_t(B) * 16 * 16, 0.0, 1.0);
        std::vector<int> labels{int(rng.uniform_int(3)), int(rng.uniform_int(3))};
        ClassCenters<double> centers(3, 4);
        for (auto& v : centers.values) v = rng.uniform(-0.5, 0.5);

        const double beta_att = 1.0, beta_aff = 1.0;
        const double lambda_att = 16.0, lambda_aff = 16.0, lambda_emb = 0.1, margin = 1.0;

        // frozen targets from the unperturbed forward
        Tensor<double> M0, tt0;
        {
            auto x = Tensor<double>::constant({B, 1, 16, 16}, image);
            auto lo = loc.forward(x, beta_att, beta_aff);
            auto out = clf.forward(lo.crop);
            M0 = mean_feature_map(out.last_conv);
            tt0 = theta_tensor<double>(batch_theta_targets(M0, pc.tau));
        }

        // analytic gradients
        std::vector<double> image_grad;
        {
            Tape<double> tape;
            auto x = tape.leaf({B, 1, 16, 16}, image, true);
            auto lo = loc.forward(x, beta_att, beta_aff);
            auto out = clf.forward(lo.crop);
            auto ce = softmax_cross_entropy(out.logits, labels);
            auto emb = loss_emb(out.embedding, labels, centers, margin);
            auto att = loss_att(lo.attention, M0, lambda_att);
            auto aff = loss_aff(lo.theta, tt0, lambda_aff);
            auto loss = total_loss(ce, emb, att, aff, lambda_emb);
            for (auto& p : loc.parameters()) p.zero_grad();
            for (auto& p : clf.parameters()) p.zero_grad();
            tape.backward(loss);
            image_grad = x.grad();
        }

        auto loss_value = [&]() {
            Tape<double> tape;
            auto x = tape.leaf({B, 1, 16, 16}, image, false);
            auto lo = loc.forward(x, beta_att, beta_aff);
            auto out = clf.forward(lo.crop);
            auto ce = softmax_cross_entropy(out.logits, labels);
            auto emb = loss_emb(out.embedding, labels, centers, margin);
            auto att = loss_att(lo.attention, M0, lambda_att);
            auto aff = loss_aff(lo.theta, tt0, lambda_aff);
            return total_loss(ce, emb, att, aff, lambda_emb).item();
        };

        size_t skipped = 0;
        auto probe = [&](const char* name, std::vector<double>& storage, size_t idx,
                         double analytic) {
            const double orig = storage[idx];
            auto fd_at = [&](double step) {
                storage[idx] = orig + step;
                const double lp = loss_value();
                storage[idx] = orig - step;
                const double lm = loss_value();
                storage[idx] = orig;
                return (lp - lm) / (2.0 * step);
            };
            const double fd = fd_at(h);
            const double fd2 = fd_at(2.0 * h);
            if (fdcheck::rel_err(fd, fd2, denom_floor) > 5e-3) {
                ++skipped;
                return;
            }
            note(sum, name, fdcheck::rel_err(analytic, fd, denom_floor), tol, log);
        };

        // image pixels
        for (int k = 0; k < 10; ++k) {
            const size_t idx = size_t(rng.uniform_int(image.size()));
            probe("pipeline/image", image, idx, image_grad[idx]);
        }
        // a slice of every module's parameters
        auto probe_params = [&](const char* name, std::vector<Tensor<double>> params) {
            for (auto& p : params) {
                for (int k = 0; k < 2; ++k) {
                    const size_t idx = size_t(rng.uniform_int(p.numel()));
                    const double analytic = p.has_grad() ? p.grad()[idx] : 0.0;
                    probe(name, p.values(), idx, analytic);
                }
            }
        };
        probe_params("pipeline/localizer", loc.parameters());
        probe_params("pipeline/classifier", clf.parameters());

        if (log && skipped > 0) *log << "  seed " << s << ": skipped " << skipped << " probes\n";
        check(skipped < 20, "pipeline grad check: too many probes skipped");
    }
    if (log)
        *log << "pipeline grad checks: " << sum.checks << " checks, " << sum.failures
             << " failures, worst " << sum.worst_rel_err << "\n";
    return sum;
}

}  // namespace e2eloc
