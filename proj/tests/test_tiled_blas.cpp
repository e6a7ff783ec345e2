#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "moefabric/oracle.hpp"
#include "moefabric/tiled_blas.hpp"

using namespace moefabric;

namespace {

TokenMatrix random_matrix(std::int64_t r, std::int64_t c, std::mt19937_64& rng, float scale = 1.0f) {
    TokenMatrix m(r, c);
    std::uniform_real_distribution<float> d(-scale, scale);
    for (auto& v : m.data) v = d(rng);
    return m;
}

TokenMatrix identity(std::int64_t n) {
    TokenMatrix m(n, n);
    for (std::int64_t i = 0; i < n; ++i) m.at(i, i) = 1.0f;
    return m;
}

float max_abs_diff(const TokenMatrix& a, const TokenMatrix& b) {
    float mx = 0.0f;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        mx = std::max(mx, std::abs(a.data[i] - b.data[i]));
    return mx;
}

}  // namespace

TEST_CASE("fused epilogue with identity lhs reproduces the rhs", "[blas]") {
    std::mt19937_64 rng(1);
    TokenMatrix a = identity(4);
    TokenMatrix b = random_matrix(4, 4, rng);
    TokenMatrix out(4, 4);
    fused_gemm_epilogue(view_of(a), view_of(b), {}, Activation::identity, view_of(out));
    CHECK(max_abs_diff(out, b) == 0.0f);
}

TEST_CASE("relu epilogue zeroes a negative product", "[blas]") {
    TokenMatrix a = identity(3);
    TokenMatrix b(3, 3);
    for (auto& v : b.data) v = -0.5f;
    TokenMatrix out(3, 3);
    fused_gemm_epilogue(view_of(a), view_of(b), {}, Activation::relu, view_of(out));
    for (float v : out.data) CHECK(v == 0.0f);
}

TEST_CASE("fused epilogue matches the naive oracle on random 8x8x8", "[blas]") {
    std::mt19937_64 rng(2);
    TokenMatrix a = random_matrix(8, 8, rng);
    TokenMatrix b = random_matrix(8, 8, rng);
    std::vector<float> bias(8);
    for (auto& v : bias) v = 0.25f;

    TokenMatrix got(8, 8);
    fused_gemm_epilogue(view_of(a), view_of(b), bias, Activation::relu, view_of(got));

    TokenMatrix want = oracle::naive_matmul(a, b);
    for (std::int64_t i = 0; i < 8; ++i)
        for (std::int64_t j = 0; j < 8; ++j) {
            const float v = want.at(i, j) + bias[static_cast<std::size_t>(j)];
            want.at(i, j) = v > 0.0f ? v : 0.0f;
        }
    CHECK(max_abs_diff(got, want) <= 1e-6f);
}

TEST_CASE("tiled partition equals untiled product, ragged edges included", "[blas]") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<std::int64_t> dim(1, 33), tile(1, 16);
    for (int it = 0; it < 100; ++it) {
        const std::int64_t m = dim(rng), k = dim(rng), n = dim(rng);
        TokenMatrix a = random_matrix(m, k, rng);
        TokenMatrix b = random_matrix(k, n, rng);
        TokenMatrix got(m, n);
        tiled_gemm(view_of(a), view_of(b), {}, Activation::identity, view_of(got), tile(rng), tile(rng));
        TokenMatrix want = oracle::naive_matmul(a, b);
        CHECK(max_abs_diff(got, want) <= 1e-6f);
    }
}

TEST_CASE("epilogue writes each output element exactly once", "[blas]") {
    std::mt19937_64 rng(4);
    TokenMatrix a = random_matrix(7, 5, rng);
    TokenMatrix b = random_matrix(5, 9, rng);
    TokenMatrix out(7, 9);

    const std::uint64_t before = epilogue_writes();
    fused_gemm_epilogue(view_of(a), view_of(b), {}, Activation::gelu, view_of(out));
    CHECK(epilogue_writes() - before == 7 * 9);

    const std::uint64_t before2 = epilogue_writes();
    tiled_gemm(view_of(a), view_of(b), {}, Activation::gelu, view_of(out), 3, 4);
    CHECK(epilogue_writes() - before2 == 7 * 9);
}

TEST_CASE("activation reference values", "[blas]") {
    CHECK(activation_apply(Activation::relu, -3.0f) == 0.0f);
    CHECK(activation_apply(Activation::relu, 2.0f) == 2.0f);
    CHECK(activation_apply(Activation::identity, -1.25f) == -1.25f);
    CHECK(activation_apply(Activation::gelu, 0.0f) == 0.0f);
    // erf-form agreement on [-10, 10]
    for (int i = -100; i <= 100; ++i) {
        const float x = static_cast<float>(i) / 10.0f;
        const double want = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
        CHECK(std::abs(activation_apply(Activation::gelu, x) - want) <= 1e-6);
    }
}

TEST_CASE("combine tile accumulates weighted rows and skips padding", "[blas]") {
    std::mt19937_64 rng(5);
    TokenMatrix tile = random_matrix(4, 6, rng);
    TokenMatrix out(8, 6);

    SECTION("single expert weight 1 copies the row") {
        std::vector<SlotMap> slots = {{3, 1.0f}, {-1, 0.0f}, {-1, 0.0f}, {-1, 0.0f}};
        combine_tile(view_of(tile), slots, 0, out);
        for (std::int64_t j = 0; j < 6; ++j) CHECK(out.at(3, j) == tile.at(0, j));
        for (std::int64_t j = 0; j < 6; ++j) CHECK(out.at(1, j) == 0.0f);
    }

    SECTION("two half weights of identical rows reconstruct the row") {
        TokenMatrix v(1, 6);
        for (std::int64_t j = 0; j < 6; ++j) v.at(0, j) = tile.at(2, j);
        std::vector<SlotMap> half = {{5, 0.5f}};
        combine_tile(subview(view_of(tile), 2, 0, 1, 6), half, 0, out);
        combine_tile(view_of(v), half, 0, out);
        for (std::int64_t j = 0; j < 6; ++j) CHECK(out.at(5, j) == Catch::Approx(tile.at(2, j)));
    }

    SECTION("random two-expert combine matches the direct sum") {
        TokenMatrix o2(8, 6);
        TokenMatrix t2 = random_matrix(2, 6, rng);
        std::vector<SlotMap> s1 = {{2, 0.7f}, {4, 0.3f}};
        combine_tile(view_of(t2), s1, 0, o2);
        for (std::int64_t j = 0; j < 6; ++j) {
            CHECK(o2.at(2, j) == Catch::Approx(0.7f * t2.at(0, j)).margin(1e-6));
            CHECK(o2.at(4, j) == Catch::Approx(0.3f * t2.at(1, j)).margin(1e-6));
        }
    }
}

TEST_CASE("two-stage FFN equals the monolithic form", "[blas]") {
    std::mt19937_64 rng(6);
    for (int it = 0; it < 20; ++it) {
        std::uniform_int_distribution<std::int64_t> dim(1, 24), tile(1, 8);
        const std::int64_t rows = dim(rng), h = dim(rng), d = dim(rng);
        TokenMatrix x = random_matrix(rows, h, rng);
        TokenMatrix w1 = random_matrix(h, d, rng);
        TokenMatrix w2 = random_matrix(d, h, rng);
        std::vector<float> b1(static_cast<std::size_t>(d), 0.05f);
        std::vector<float> b2(static_cast<std::size_t>(h), -0.02f);

        TokenMatrix c1(rows, d), c2(rows, h);
        const std::int64_t bm = tile(rng), bn = tile(rng);
        tiled_gemm(view_of(x), view_of(w1), b1, Activation::gelu, view_of(c1), bm, bn);
        tiled_gemm(view_of(c1), view_of(w2), b2, Activation::identity, view_of(c2), bm, bn);

        // monolithic reference
        TokenMatrix want(rows, h);
        for (std::int64_t i = 0; i < rows; ++i) {
            std::vector<float> hid(static_cast<std::size_t>(d));
            for (std::int64_t dd = 0; dd < d; ++dd) {
                float acc = 0.0f;
                for (std::int64_t k = 0; k < h; ++k) acc += x.at(i, k) * w1.at(k, dd);
                hid[static_cast<std::size_t>(dd)] =
                    activation_apply(Activation::gelu, acc + b1[static_cast<std::size_t>(dd)]);
            }
            for (std::int64_t k = 0; k < h; ++k) {
                float acc = 0.0f;
                for (std::int64_t dd = 0; dd < d; ++dd)
                    acc += hid[static_cast<std::size_t>(dd)] * w2.at(dd, k);
                want.at(i, k) = acc + b2[static_cast<std::size_t>(k)];
            }
        }
        float mx = 0.0f, ref = 0.0f;
        for (std::size_t i = 0; i < want.data.size(); ++i) {
            mx = std::max(mx, std::abs(c2.data[i] - want.data[i]));
            ref = std::max(ref, std::abs(want.data[i]));
        }
        CHECK(mx <= 1e-5f * std::max(1.0f, ref));
    }
}

TEST_CASE("shape mismatches are rejected", "[blas]") {
    TokenMatrix a(2, 3), b(4, 2), out(2, 2);
    CHECK_THROWS_AS(fused_gemm_epilogue(view_of(a), view_of(b), {}, Activation::identity, view_of(out)),
                    ConfigError);
}
