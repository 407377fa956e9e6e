#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "e2eloc/nn.hpp"
#include "e2eloc/ops.hpp"
#include "e2eloc/tensor.hpp"

// Self-supervision targets and loss terms. Target tensors (M, theta_tau) are
// plain values: gradients never reach them.

namespace e2eloc {

// Axis-aligned box in normalized [-1,1] coordinates, x0 < x1 and y0 < y1
// unless flagged degenerate.
struct BBox {
    double x0 = -1.0, y0 = -1.0, x1 = 1.0, y1 = 1.0;
    bool degenerate = false;

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return width() * height(); }
};

// Affine crop parameters [s_x, s_y, t_x, t_y].
struct ThetaParams {
    double s_x = 1.0, s_y = 1.0, t_x = 0.0, t_y = 0.0;
    bool degenerate = false;
};

// Min-max normalize, binarize at tau, return the tight rectangle over all
// foreground cells. A cell spans its full extent: column j covers
// [-1 + 2j/J, -1 + 2(j+1)/J]. A constant map has no foreground and yields
// the full-image box with the degenerate flag set.
template <typename T>
BBox extract_bbox(const T* map, int I, int J, double tau) {
    check(I >= 1 && J >= 1, "extract_bbox: empty map");
    T mn = map[0], mx = map[0];
    const size_t n = size_t(I) * size_t(J);
    for (size_t i = 1; i < n; ++i) {
        mn = std::min(mn, map[i]);
        mx = std::max(mx, map[i]);
    }
    BBox box;
    if (!(double(mx) > double(mn))) {
        box.degenerate = true;
        return box;
    }
    const double inv = 1.0 / (double(mx) - double(mn));
    int i0 = I, i1 = -1, j0 = J, j1 = -1;
    for (int i = 0; i < I; ++i)
        for (int j = 0; j < J; ++j)
            if ((double(map[size_t(i) * J + j]) - double(mn)) * inv > tau) {
                i0 = std::min(i0, i);
                i1 = std::max(i1, i);
                j0 = std::min(j0, j);
                j1 = std::max(j1, j);
            }
    if (i1 < 0) {
        box.degenerate = true;
        return box;
    }
    box.x0 = -1.0 + 2.0 * j0 / J;
    box.x1 = -1.0 + 2.0 * (j1 + 1) / J;
    box.y0 = -1.0 + 2.0 * i0 / I;
    box.y1 = -1.0 + 2.0 * (i1 + 1) / I;
    return box;
}

template <typename T>
BBox extract_bbox(const std::vector<T>& map, int I, int J, double tau) {
    check(map.size() == size_t(I) * size_t(J), "extract_bbox: map size mismatch");
    return extract_bbox(map.data(), I, J, tau);
}

// Box -> affine parameters such that the sampling grid covers exactly the box.
inline ThetaParams bbox_to_theta(const BBox& box) {
    ThetaParams th;
    if (box.degenerate) {
        th.degenerate = true;
        return th;
    }
    th.s_x = (box.x1 - box.x0) * 0.5;
    th.t_x = (box.x0 + box.x1) * 0.5;
    th.s_y = (box.y1 - box.y0) * 0.5;
    th.t_y = (box.y0 + box.y1) * 0.5;
    return th;
}

inline BBox theta_to_bbox(const ThetaParams& th) {
    BBox box;
    box.x0 = th.t_x - th.s_x;
    box.x1 = th.t_x + th.s_x;
    box.y0 = th.t_y - th.s_y;
    box.y1 = th.t_y + th.s_y;
    box.degenerate = th.degenerate || !(box.x1 > box.x0) || !(box.y1 > box.y0);
    return box;
}

inline BBox clip_box(const BBox& box) {
    BBox c = box;
    c.x0 = std::clamp(c.x0, -1.0, 1.0);
    c.x1 = std::clamp(c.x1, -1.0, 1.0);
    c.y0 = std::clamp(c.y0, -1.0, 1.0);
    c.y1 = std::clamp(c.y1, -1.0, 1.0);
    c.degenerate = box.degenerate || !(c.x1 > c.x0) || !(c.y1 > c.y0);
    return c;
}

// Channel mean of the last conv features, detached: the target path carries
// no gradient.
template <typename T>
Tensor<T> mean_feature_map(const Tensor<T>& features) {
    check(features.ndim() == 4, "mean_feature_map: expected (B,C,I,J)");
    const int B = features.dim(0), C = features.dim(1), I = features.dim(2),
              J = features.dim(3);
    const size_t hw = size_t(I) * J;
    std::vector<T> out(size_t(B) * hw, T(0));
    const T inv = T(1) / T(C);
    const T* pf = features.data();
    for (int b = 0; b < B; ++b) {
        T* orow = out.data() + size_t(b) * hw;
        for (int c = 0; c < C; ++c) {
            const T* row = pf + (size_t(b) * C + c) * hw;
            for (size_t i = 0; i < hw; ++i) orow[i] += row[i];
        }
        for (size_t i = 0; i < hw; ++i) orow[i] *= inv;
    }
    return Tensor<T>::constant({B, 1, I, J}, std::move(out));
}

// Per-sample target thetas from a batch of detached maps (B,1,I,J).
template <typename T>
std::vector<ThetaParams> batch_theta_targets(const Tensor<T>& maps, double tau) {
    check(maps.ndim() == 4 && maps.dim(1) == 1, "batch_theta_targets: expected (B,1,I,J)");
    const int B = maps.dim(0), I = maps.dim(2), J = maps.dim(3);
    std::vector<ThetaParams> out(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b)
        out[size_t(b)] =
            bbox_to_theta(extract_bbox(maps.data() + size_t(b) * I * J, I, J, tau));
    return out;
}

template <typename T>
Tensor<T> theta_tensor(const std::vector<ThetaParams>& ths) {
    std::vector<T> vals;
    vals.reserve(ths.size() * 4);
    for (const auto& t : ths) {
        vals.push_back(T(t.s_x));
        vals.push_back(T(t.s_y));
        vals.push_back(T(t.t_x));
        vals.push_back(T(t.t_y));
    }
    return Tensor<T>::constant({int(ths.size()), 4}, std::move(vals));
}

// L_att = lambda_att * SL1(A, M); M detached.
template <typename T>
Tensor<T> loss_att(const Tensor<T>& A, const Tensor<T>& M, T lambda_att) {
    return mul_scalar(smooth_l1(A, M), lambda_att);
}

// L_aff = lambda_aff * SL1(theta, theta_tau); theta_tau detached.
template <typename T>
Tensor<T> loss_aff(const Tensor<T>& theta, const Tensor<T>& theta_tau, T lambda_aff) {
    return mul_scalar(smooth_l1(theta, theta_tau), lambda_aff);
}

// Per-class embedding centroids updated by exponential moving average of the
// batch embeddings; never part of the differentiation record.
template <typename T>
struct ClassCenters {
    int num_classes = 0;
    int dim = 0;
    T decay = T(0.95);
    std::vector<T> values;  // (K, D), zero-initialized

    ClassCenters() = default;
    ClassCenters(int k, int d, T ema_decay = T(0.95))
        : num_classes(k), dim(d), decay(ema_decay), values(size_t(k) * size_t(d), T(0)) {}

    void update(const std::vector<T>& emb, const std::vector<int>& labels) {
        check(emb.size() == labels.size() * size_t(dim), "ClassCenters: embedding size mismatch");
        std::vector<T> sums(values.size(), T(0));
        std::vector<int> counts(size_t(num_classes), 0);
        for (size_t b = 0; b < labels.size(); ++b) {
            const int y = labels[b];
            check(y >= 0 && y < num_classes, "ClassCenters: unseen class id");
            ++counts[size_t(y)];
            for (int d = 0; d < dim; ++d) sums[size_t(y) * dim + d] += emb[b * size_t(dim) + d];
        }
        for (int k = 0; k < num_classes; ++k) {
            if (counts[size_t(k)] == 0) continue;
            const T inv = T(1) / T(counts[size_t(k)]);
            for (int d = 0; d < dim; ++d) {
                T& c = values[size_t(k) * dim + d];
                c = decay * c + (T(1) - decay) * sums[size_t(k) * dim + d] * inv;
            }
        }
    }
};

// Hinge penalty pushing apart the centers of classes present in the batch,
// averaged over pairs. Centers carry no gradient, so this only contributes
// to the reported loss value.
template <typename T>
T center_hinge(const ClassCenters<T>& centers, const std::vector<int>& labels, T margin) {
    std::vector<int> present(labels);
    std::sort(present.begin(), present.end());
    present.erase(std::unique(present.begin(), present.end()), present.end());
    if (present.size() < 2) return T(0);
    T acc = T(0);
    int pairs = 0;
    for (size_t a = 0; a < present.size(); ++a)
        for (size_t b = a + 1; b < present.size(); ++b) {
            T d2 = T(0);
            for (int d = 0; d < centers.dim; ++d) {
                const T diff = centers.values[size_t(present[a]) * centers.dim + d] -
                               centers.values[size_t(present[b]) * centers.dim + d];
                d2 += diff * diff;
            }
            const T gap = margin - std::sqrt(d2);
            if (gap > T(0)) acc += gap;
            ++pairs;
        }
    return acc / T(pairs);
}

// Squared distance to own class center plus the center-separation hinge.
template <typename T>
Tensor<T> loss_emb(const Tensor<T>& embeddings, const std::vector<int>& labels,
                   const ClassCenters<T>& centers, T margin) {
    check(centers.num_classes > 0 && !centers.values.empty(), "loss_emb: centers not initialized");
    auto pull = center_pull(embeddings, centers.values, labels, centers.num_classes);
    return add_scalar(pull, center_hinge(centers, labels, margin));
}

// L = L_CE + lambda * L_emb + L_att + L_aff
template <typename T>
Tensor<T> total_loss(const Tensor<T>& ce, const Tensor<T>& emb, const Tensor<T>& att,
                     const Tensor<T>& aff, T lambda) {
    return add(add(ce, mul_scalar(emb, lambda)), add(att, aff));
}

}  // namespace e2eloc
