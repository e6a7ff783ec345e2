#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <random>
#include <set>

#include "moefabric/gate.hpp"

using namespace moefabric;

namespace {

MoeConfig gate_cfg(std::int64_t s, std::int64_t h, std::int64_t e, std::int64_t k, double cf = 1.0,
                   std::int64_t p = 1) {
    MoeConfig c;
    c.tokens_per_device = s;
    c.embed_dim = h;
    c.experts_total = e;
    c.topk = k;
    c.capacity_factor = cf;
    c.devices = p;
    c.tile_rows = 4;
    c.tile_cols = 4;
    return c;
}

GateWeights identity_gate(std::int64_t h, std::int64_t e) {
    GateWeights g;
    g.wg = TokenMatrix(h, e);
    for (std::int64_t i = 0; i < std::min(h, e); ++i) g.wg.at(i, i) = 1.0f;
    return g;
}

}  // namespace

TEST_CASE("top-1 routing of a single token yields combine weight 1", "[gate]") {
    MoeConfig cfg = gate_cfg(1, 2, 2, 1);
    TokenMatrix a(1, 2);
    a.at(0, 0) = 4.0f;  // logits favor expert 0
    GateOutput out = gate_forward(a, identity_gate(2, 2), cfg);
    REQUIRE(out.slot_counts[0] == 1);
    CHECK(out.slot(0, 0).token == 0);
    CHECK(out.slot(0, 0).weight == 1.0f);
    CHECK(out.dropped.empty());
}

TEST_CASE("uniform logits with k=2 fill both experts and drop the overflow", "[gate]") {
    MoeConfig cfg = gate_cfg(4, 2, 2, 2);  // C = ceil(4/2) = 2
    REQUIRE(expert_capacity(cfg) == 2);
    TokenMatrix a(4, 2);  // all-zero rows: uniform affinities
    GateOutput out = gate_forward(a, identity_gate(2, 2), cfg);

    for (std::int64_t e = 0; e < 2; ++e) {
        REQUIRE(out.slot_counts[static_cast<std::size_t>(e)] == 2);
        CHECK(out.slot(e, 0).token == 0);
        CHECK(out.slot(e, 1).token == 1);
        CHECK(out.slot(e, 0).weight == Catch::Approx(0.5));
        CHECK(out.slot(e, 1).weight == Catch::Approx(0.5));
    }
    REQUIRE(out.dropped.size() == 4);  // tokens 2 and 3 on both experts
    std::set<std::pair<std::int64_t, std::int64_t>> d(out.dropped.begin(), out.dropped.end());
    CHECK(d.count({2, 0}) == 1);
    CHECK(d.count({2, 1}) == 1);
    CHECK(d.count({3, 0}) == 1);
    CHECK(d.count({3, 1}) == 1);
}

TEST_CASE("combine weights reproduce the affinity split", "[gate]") {
    MoeConfig cfg = gate_cfg(2, 2, 2, 2);
    TokenMatrix a(2, 2);
    a.at(0, 0) = std::log(0.8f);
    a.at(0, 1) = std::log(0.2f);
    GateOutput out = gate_forward(a, identity_gate(2, 2), cfg);

    CHECK(out.g_phi.at(0, 0) == Catch::Approx(0.8).margin(1e-6));
    CHECK(out.g_phi.at(0, 1) == Catch::Approx(0.2).margin(1e-6));
    // C_0 = 0.8 + 0.2 = 1, so the weights are the affinities themselves
    CHECK(out.slot(0, 0).weight == Catch::Approx(0.8).margin(1e-6));
    CHECK(out.slot(1, 0).weight == Catch::Approx(0.2).margin(1e-6));
}

TEST_CASE("softmax rows are probability vectors", "[gate]") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<float> d(-2.0f, 2.0f);
    MoeConfig cfg = gate_cfg(16, 8, 6, 2);
    TokenMatrix a(16, 8);
    for (auto& v : a.data) v = d(rng);
    GateWeights g;
    g.wg = TokenMatrix(8, 6);
    for (auto& v : g.wg.data) v = d(rng);
    GateOutput out = gate_forward(a, g, cfg);
    for (std::int64_t i = 0; i < 16; ++i) {
        float sum = 0.0f;
        for (std::int64_t e = 0; e < 6; ++e) {
            const float p = out.g_phi.at(i, e);
            CHECK(p >= 0.0f);
            CHECK(p <= 1.0f);
            sum += p;
        }
        CHECK(sum == Catch::Approx(1.0).margin(1e-6));
    }
}

TEST_CASE("slot and drop counts conserve S*k", "[gate]") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    for (int it = 0; it < 30; ++it) {
        std::uniform_int_distribution<std::int64_t> sd(1, 24), ed(1, 8), kd(1, 3);
        const std::int64_t s = sd(rng), e = ed(rng);
        const std::int64_t k = std::min(kd(rng), e);
        MoeConfig cfg = gate_cfg(s, 6, e, k, 0.75);
        TokenMatrix a(s, 6);
        for (auto& v : a.data) v = d(rng);
        GateWeights g;
        g.wg = TokenMatrix(6, e);
        for (auto& v : g.wg.data) v = d(rng);
        GateOutput out = gate_forward(a, g, cfg);
        std::int64_t slots = 0;
        for (std::int64_t x : out.slot_counts) slots += x;
        CHECK(slots + static_cast<std::int64_t>(out.dropped.size()) == s * k);
        for (std::int64_t x : out.slot_counts) CHECK(x <= out.capacity);
    }
}

TEST_CASE("routing tables are bit-identical across repeated calls", "[gate]") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    MoeConfig cfg = gate_cfg(12, 8, 4, 2);
    TokenMatrix a(12, 8);
    for (auto& v : a.data) v = d(rng);
    GateWeights g;
    g.wg = TokenMatrix(8, 4);
    for (auto& v : g.wg.data) v = d(rng);

    GateOutput one = gate_forward(a, g, cfg);
    GateOutput two = gate_forward(a, g, cfg);
    REQUIRE(one.g_phi.data.size() == two.g_phi.data.size());
    CHECK(std::memcmp(one.g_phi.data.data(), two.g_phi.data.data(),
                      one.g_phi.data.size() * sizeof(float)) == 0);
    REQUIRE(one.table.size() == two.table.size());
    for (std::size_t i = 0; i < one.table.size(); ++i) {
        CHECK(one.table[i].token == two.table[i].token);
        CHECK(one.table[i].weight == two.table[i].weight);
    }
    CHECK(one.dropped == two.dropped);
}

TEST_CASE("top-k selection is shift invariant", "[gate]") {
    std::mt19937_64 rng(14);
    std::uniform_real_distribution<float> d(-3.0f, 3.0f);
    for (int it = 0; it < 200; ++it) {
        float z[8], zs[8];
        for (int i = 0; i < 8; ++i) {
            z[i] = d(rng);
            zs[i] = z[i] + 7.5f;
        }
        std::vector<std::int64_t> a, b;
        detail::select_topk(z, 8, 3, a);
        detail::select_topk(zs, 8, 3, b);
        CHECK(a == b);
    }
}

TEST_CASE("manifest covers routed pairs per destination device", "[gate]") {
    SECTION("all-local routing leaves remote entries empty") {
        MoeConfig cfg = gate_cfg(6, 4, 4, 1, 2.0, 2);  // experts 0,1 on dev0; 2,3 on dev1
        TokenMatrix a(6, 4);
        for (std::int64_t i = 0; i < 6; ++i) a.at(i, 0) = 5.0f;  // everyone picks expert 0
        GateOutput out = gate_forward(a, identity_gate(4, 4), cfg);
        DispatchManifest mf = dispatch_manifest(out, cfg);
        REQUIRE(mf.per_device.size() == 2);
        CHECK(mf.per_device[0][0].count == 6);
        CHECK(mf.per_device[1][0].count == 0);
        CHECK(mf.per_device[1][1].count == 0);
    }

    SECTION("capacity clips a skewed expert and records the drop") {
        MoeConfig cfg = gate_cfg(8, 4, 2, 1);  // C = 4
        REQUIRE(expert_capacity(cfg) == 4);
        TokenMatrix a(8, 4);
        for (std::int64_t i = 0; i < 8; ++i) {
            if (i < 5) a.at(i, 0) = 5.0f;  // five tokens want expert 0
            else a.at(i, 1) = 5.0f;
        }
        GateOutput out = gate_forward(a, identity_gate(4, 2), cfg);
        DispatchManifest mf = dispatch_manifest(out, cfg);
        CHECK(mf.per_device[0][0].count == 4);
        CHECK(mf.per_device[0][0].tokens == std::vector<std::int64_t>{0, 1, 2, 3});
        REQUIRE(out.dropped.size() == 1);
        CHECK(out.dropped[0] == std::pair<std::int64_t, std::int64_t>{4, 0});
    }

    SECTION("uniform routing fills each expert to the pigeonhole count") {
        MoeConfig cfg = gate_cfg(8, 4, 4, 1, 1.0);
        REQUIRE(expert_capacity(cfg) == 2);
        TokenMatrix a(8, 4);
        for (std::int64_t i = 0; i < 8; ++i) a.at(i, i % 4) = 5.0f;
        GateOutput out = gate_forward(a, identity_gate(4, 4), cfg);
        DispatchManifest mf = dispatch_manifest(out, cfg);
        for (std::int64_t e = 0; e < 4; ++e) CHECK(mf.per_device[0][e].count == 2);
        CHECK(mf.total_routed() == 8);
    }
}

TEST_CASE("zero capacity drops everything", "[gate]") {
    MoeConfig cfg = gate_cfg(4, 2, 2, 1);
    TokenMatrix a(4, 2);
    GateOutput out = gate_forward_with_capacity(a, identity_gate(2, 2), cfg, 0);
    CHECK(out.slot_counts[0] == 0);
    CHECK(out.slot_counts[1] == 0);
    CHECK(out.dropped.size() == 4);
}

TEST_CASE("dimension mismatches raise configuration errors", "[gate]") {
    MoeConfig cfg = gate_cfg(2, 4, 2, 1);
    TokenMatrix wrong(2, 3);
    CHECK_THROWS_AS(gate_forward(wrong, identity_gate(4, 2), cfg), ConfigError);
    CHECK_THROWS_AS(gate_forward(TokenMatrix(2, 4), identity_gate(3, 2), cfg), ConfigError);
}
