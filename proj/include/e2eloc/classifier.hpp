#pragma once

#include <string>
#include <vector>

#include "e2eloc/layers.hpp"
#include "e2eloc/nn.hpp"
#include "e2eloc/tensor.hpp"

namespace e2eloc {

struct ClassifierConfig {
    int in_channels = 1;
    int input_size = 64;
    std::vector<int> widths = {16, 32, 64};  // conv stages; 2x2 pool after all but the last
    int embed_dim = 64;
    int num_classes = 10;

    // spatial size of the last conv stage; must equal the AttNet map size
    int last_conv_size() const {
        int s = input_size;
        for (size_t i = 0; i + 1 < widths.size(); ++i) s /= 2;
        return s;
    }
};

template <typename T>
struct ClassifyOut {
    Tensor<T> logits;     // (B, K)
    Tensor<T> embedding;  // (B, D)
    Tensor<T> last_conv;  // (B, C, I, J), feeds the mean feature map
};

// Small conv stack standing in for the paper-scale backbone: conv-relu(-pool)
// stages, global average pooling, an embedding layer and the logits layer.
template <typename T>
struct Classifier {
    ClassifierConfig cfg;
    std::vector<Conv2dLayer<T>> convs;
    LinearLayer<T> embed, logits_layer;

    Classifier() = default;
    Classifier(const ClassifierConfig& c, Rng& rng) : cfg(c) {
        check(c.widths.size() >= 1, "Classifier: at least one conv stage");
        check(c.embed_dim >= 2 && c.num_classes >= 2, "Classifier: embed_dim and classes >= 2");
        int size = c.input_size;
        int ci = c.in_channels;
        for (size_t i = 0; i < c.widths.size(); ++i) {
            convs.emplace_back(ci, c.widths[i], 3, 1, 1, rng);
            ci = c.widths[i];
            if (i + 1 < c.widths.size()) {
                check(size % 2 == 0, "Classifier: stage input size must be even");
                size /= 2;
            }
        }
        embed = LinearLayer<T>(ci, c.embed_dim, rng);
        logits_layer = LinearLayer<T>(c.embed_dim, c.num_classes, rng);
    }

    ClassifyOut<T> forward(const Tensor<T>& image) const {
        check(image.dim(2) == cfg.input_size && image.dim(3) == cfg.input_size,
              "Classifier: input size mismatch, got " + shape_str(image.shape()) +
                  " configured " + std::to_string(cfg.input_size));
        check(image.dim(1) == cfg.in_channels, "Classifier: channel mismatch");
        Tensor<T> h = image;
        for (size_t i = 0; i < convs.size(); ++i) {
            h = relu(convs[i](h));
            if (i + 1 < convs.size()) h = maxpool2x2(h);
        }
        auto pooled = gap2d(h);
        auto emb = embed(pooled);
        return {logits_layer(emb), emb, h};
    }

    std::vector<Tensor<T>> parameters() {
        std::vector<Tensor<T>> out;
        for (auto& c : convs) c.collect(out);
        embed.collect(out);
        logits_layer.collect(out);
        return out;
    }
};

}  // namespace e2eloc
