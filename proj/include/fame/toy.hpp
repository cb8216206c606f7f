#pragma once

#include <vector>

#include "fame/data.hpp"
#include "fame/fame_layer.hpp"
#include "fame/gradcheck.hpp"
#include "fame/train.hpp"

namespace fame {

/// The small configuration used for gradient checking: d=8, H=2, N=2, two
/// blocks, sequence length 5, 20 items, no dropout.
inline BackboneConfig toy_backbone() {
    BackboneConfig c;
    c.num_items = 20;
    c.d = 8;
    c.heads = 2;
    c.blocks = 2;
    c.max_len = 5;
    c.dropout = 0.0;
    return c;
}

/// Three rows: full length, left-padded, and a single item.
inline Batch toy_batch() {
    Batch b;
    b.max_len = 5;
    detail::append_row(b, {3, 7, 1, 12, 20}, 5, 0);
    detail::append_row(b, {2, 9, 17}, 4, 1);
    detail::append_row(b, {11}, 6, 2);
    return b;
}

/// Gradient check of the complete FAME model plus cross-entropy over every
/// non-padding position of the toy batch. Reports one entry per parameter.
inline GradCheckResult toy_gradcheck(std::uint64_t seed = 1, double eps = 1e-5) {
    FameConfig fc;
    fc.experts = 2;
    FameModel model(toy_backbone(), fc, seed);
    const auto batch = toy_batch();
    std::vector<std::size_t> targets;
    const auto rows = training_rows(batch, true, targets);
    auto forward = [&] {
        ForwardContext ctx;
        return cross_entropy_loss(model.forward(batch, rows, ctx), targets);
    };
    std::vector<NamedTensor> params;
    for (const auto& [name, t] : model.parameters().entries()) params.emplace_back(name, t);
    return grad_check(forward, std::move(params), eps);
}

}  // namespace fame
