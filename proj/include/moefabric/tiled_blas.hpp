#pragma once

// Tile-granular fused compute. A task computes out = phi(A * B + bias) for
// exactly one tile in a single pass: the activation and bias addition are
// applied to the accumulator before the one store per element. Ragged edge
// tiles are handled by explicit bounds, never by zero padding, so the
// one-write-per-element property stays exact.

#include <cassert>
#include <cmath>
#include <cstdint>
#include <span>

#include "moefabric/config.hpp"

namespace moefabric {

/// Immutable strided 2-D view.
struct ConstView {
    const float* data = nullptr;
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::int64_t stride = 0;  // elements between row starts

    float at(std::int64_t r, std::int64_t c) const { return data[r * stride + c]; }
};

/// Mutable strided 2-D view.
struct MutView {
    float* data = nullptr;
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::int64_t stride = 0;

    float& at(std::int64_t r, std::int64_t c) const { return data[r * stride + c]; }
    ConstView as_const() const { return {data, rows, cols, stride}; }
};

inline ConstView view_of(const TokenMatrix& m) { return {m.data.data(), m.rows, m.cols, m.cols}; }
inline MutView view_of(TokenMatrix& m) { return {m.data.data(), m.rows, m.cols, m.cols}; }

/// Rectangular sub-view; bounds are the caller's responsibility.
inline ConstView subview(ConstView v, std::int64_t r0, std::int64_t c0, std::int64_t nr, std::int64_t nc) {
    return {v.data + r0 * v.stride + c0, nr, nc, v.stride};
}
inline MutView subview(MutView v, std::int64_t r0, std::int64_t c0, std::int64_t nr, std::int64_t nc) {
    return {v.data + r0 * v.stride + c0, nr, nc, v.stride};
}

/// Tile coordinates inside a parent matrix.
struct Tile {
    std::int64_t row0 = 0;
    std::int64_t col0 = 0;
    std::int64_t rows = 0;  // <= bM
    std::int64_t cols = 0;  // <= bN
};

inline float activation_apply(Activation phi, float x) {
    switch (phi) {
        case Activation::relu: return x > 0.0f ? x : 0.0f;
        case Activation::gelu:
            // erf form; odd fixed point at 0
            return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752440f));
        case Activation::identity: return x;
    }
    return x;
}

// Counts stores issued by the fused epilogue on this thread. Tests assert
// one write per output element to observe fusion.
inline std::uint64_t& epilogue_writes() {
    thread_local std::uint64_t n = 0;
    return n;
}

/// out = phi(a * b + bias), one store per output element.
/// a: m x k, b: k x n (strided column slice of a larger operand), bias: span
/// of length n aligned to out's columns (empty means zero). The inner k loop
/// runs ascending so every output element accumulates in a fixed order.
inline void fused_gemm_epilogue(ConstView a, ConstView b, std::span<const float> bias,
                                Activation phi, MutView out) {
    if (a.cols != b.rows || a.rows != out.rows || b.cols != out.cols)
        throw ConfigError("fused_gemm_epilogue: shape mismatch");
    assert(bias.empty() || static_cast<std::int64_t>(bias.size()) >= out.cols);
    for (std::int64_t i = 0; i < a.rows; ++i) {
        const float* arow = a.data + i * a.stride;
        for (std::int64_t j = 0; j < b.cols; ++j) {
            float acc = 0.0f;
            const float* bcol = b.data + j;
            for (std::int64_t k = 0; k < a.cols; ++k) acc += arow[k] * bcol[k * b.stride];
            if (!bias.empty()) acc += bias[static_cast<std::size_t>(j)];
            out.at(i, j) = activation_apply(phi, acc);
            ++epilogue_writes();
        }
    }
}

/// Full matrix product evaluated tile by tile over a bM x bN partition.
/// Equivalent to the untiled product because each output element still sums
/// the whole inner dimension in ascending order.
inline void tiled_gemm(ConstView a, ConstView b, std::span<const float> bias, Activation phi,
                       MutView out, std::int64_t tile_rows, std::int64_t tile_cols) {
    if (a.cols != b.rows || a.rows != out.rows || b.cols != out.cols)
        throw ConfigError("tiled_gemm: shape mismatch");
    for (std::int64_t r0 = 0; r0 < out.rows; r0 += tile_rows) {
        const std::int64_t nr = std::min(tile_rows, out.rows - r0);
        for (std::int64_t c0 = 0; c0 < out.cols; c0 += tile_cols) {
            const std::int64_t nc = std::min(tile_cols, out.cols - c0);
            auto bias_slice = bias.empty() ? bias : bias.subspan(static_cast<std::size_t>(c0), static_cast<std::size_t>(nc));
            fused_gemm_epilogue(subview(a, r0, 0, nr, a.cols), subview(b, 0, c0, b.rows, nc),
                                bias_slice, phi, subview(out, r0, c0, nr, nc));
        }
    }
}

/// Per-slot mapping of an expert-output row back to its token.
/// token < 0 marks a padding slot that must not be accumulated.
struct SlotMap {
    std::int64_t token = -1;
    float weight = 0.0f;
};

/// Weighted row-wise accumulation of an expert-output tile into O:
/// O[token(i), col0 + j] += w_i * tile[i, j]. Padding rows are skipped.
inline void combine_tile(ConstView tile, std::span<const SlotMap> slots, std::int64_t col0,
                         TokenMatrix& out) {
    assert(static_cast<std::int64_t>(slots.size()) >= tile.rows);
    for (std::int64_t i = 0; i < tile.rows; ++i) {
        const SlotMap& s = slots[static_cast<std::size_t>(i)];
        if (s.token < 0) continue;
        float* orow = out.row(s.token) + col0;
        const float* trow = tile.data + i * tile.stride;
        for (std::int64_t j = 0; j < tile.cols; ++j) orow[j] += s.weight * trow[j];
    }
}

}  // namespace moefabric
