#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "moefabric/config.hpp"

using namespace moefabric;

namespace {

MoeConfig cap_cfg(std::int64_t s, std::int64_t e, double cf) {
    MoeConfig c;
    c.tokens_per_device = s;
    c.experts_total = e;
    c.capacity_factor = cf;
    c.devices = 1;
    return c;
}

// independent oracle: smallest multiple of b >= c by scanning multiples
std::int64_t padded_by_scan(std::int64_t c, std::int64_t b) {
    std::int64_t m = b;
    while (m < c) m += b;
    return m;
}

}  // namespace

TEST_CASE("expert capacity reference points", "[config]") {
    CHECK(expert_capacity(cap_cfg(4096, 16, 1.0)) == 256);
    CHECK(expert_capacity(cap_cfg(4096, 128, 1.0)) == 32);
    CHECK(expert_capacity(cap_cfg(1, 1, 1.0)) == 1);
}

TEST_CASE("padded capacity aligns to the tile height", "[config]") {
    CHECK(padded_capacity(32, 128) == 128);
    CHECK(padded_capacity(1024, 128) == 1024);
    CHECK(padded_capacity(130, 128) == padded_by_scan(130, 128));
    CHECK(padded_capacity(130, 128) == 256);
}

TEST_CASE("capacity table round trip", "[config]") {
    // (tokens, experts) -> (EC, max(bM, EC)) at cf = 1.0, bM = 128
    struct Row {
        std::int64_t tokens, experts, ec, padded;
    };
    const Row rows[] = {
        {4096, 16, 256, 256},    {4096, 32, 128, 128},   {4096, 64, 64, 128},
        {4096, 128, 32, 128},    {8192, 16, 512, 512},   {8192, 32, 256, 256},
        {8192, 64, 128, 128},    {8192, 128, 64, 128},   {16384, 16, 1024, 1024},
        {16384, 32, 512, 512},   {16384, 64, 256, 256},  {16384, 128, 128, 128},
    };
    for (const Row& r : rows) {
        const std::int64_t ec = expert_capacity(cap_cfg(r.tokens, r.experts, 1.0));
        CHECK(ec == r.ec);
        CHECK(padded_capacity(ec, 128) == r.padded);
    }
}

TEST_CASE("capacity monotonicity and padding bounds", "[config]") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::int64_t> sd(1, 4096), ed(1, 128), bd(1, 128);
    std::uniform_real_distribution<double> cfd(0.1, 3.0);
    for (int i = 0; i < 500; ++i) {
        const std::int64_t s = sd(rng), e = ed(rng), b = bd(rng);
        const double cf = cfd(rng);
        const std::int64_t c = expert_capacity(cap_cfg(s, e, cf));
        CHECK(expert_capacity(cap_cfg(s + 64, e, cf)) >= c);
        CHECK(expert_capacity(cap_cfg(s, e, cf + 0.5)) >= c);
        if (e > 1) CHECK(expert_capacity(cap_cfg(s, e - 1, cf)) >= c);
        const std::int64_t p = padded_capacity(c, b);
        CHECK(p % b == 0);
        CHECK(p >= c);
        CHECK(p - c < b);
    }
}

TEST_CASE("config validation rejects bad shapes", "[config]") {
    MoeConfig c;
    c.devices = 4;
    c.experts_total = 6;  // not divisible by 4
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.experts_total = 8;
    CHECK_NOTHROW(c.validate());
    c.topk = 9;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.topk = 2;
    c.capacity_factor = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.capacity_factor = 1.0;
    c.tokens_per_device = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("activation names parse both ways", "[config]") {
    CHECK(activation_from_string("relu") == Activation::relu);
    CHECK(activation_from_string("gelu") == Activation::gelu);
    CHECK(activation_from_string("identity") == Activation::identity);
    CHECK_THROWS_AS(activation_from_string("swish"), ConfigError);
}
