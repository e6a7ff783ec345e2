#pragma once

// Core domain types and capacity arithmetic shared by every module.
//
// MoeConfig is validated once at construction time and immutable afterwards;
// it is safe to share by const reference across all worker threads.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace moefabric {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Raised when a one-sided write violates the layout's validity rules or a
// flag is signalled twice in one round. Never expected on a healthy run.
struct ProtocolError : std::runtime_error {
    explicit ProtocolError(const std::string& what) : std::runtime_error(what) {}
};

// Raised when the runtime detects a stall (no global progress within the
// poll budget) or an internal accounting bug. Carries a state dump.
struct RuntimeFault : std::runtime_error {
    explicit RuntimeFault(const std::string& what) : std::runtime_error(what) {}
};

enum class Activation : std::uint8_t { relu, gelu, identity };

inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::gelu: return "gelu";
        case Activation::identity: return "identity";
    }
    return "?";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "gelu") return Activation::gelu;
    if (s == "identity") return Activation::identity;
    throw ConfigError("unknown activation: " + s);
}

/// Model + run shape. S tokens per device, H embedding dim, D FFN inner dim,
/// E_total experts spread uniformly over P devices, top-k routing with
/// capacity factor cf, bM x bN compute/transfer tiles.
struct MoeConfig {
    std::int64_t tokens_per_device = 8;    // S
    std::int64_t embed_dim = 8;            // H
    std::int64_t ffn_dim = 8;              // D
    std::int64_t experts_total = 2;        // E_total
    std::int64_t devices = 1;              // P
    std::int64_t topk = 1;                 // k
    double capacity_factor = 1.0;          // cf
    std::int64_t tile_rows = 16;           // bM
    std::int64_t tile_cols = 8;            // bN
    Activation activation = Activation::relu;
    std::uint64_t seed = 0;

    std::int64_t local_experts() const { return experts_total / devices; }

    void validate() const {
        if (tokens_per_device < 1) throw ConfigError("tokens_per_device must be >= 1");
        if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
        if (ffn_dim < 1) throw ConfigError("ffn_dim must be >= 1");
        if (devices < 1) throw ConfigError("devices must be >= 1");
        if (experts_total < 1) throw ConfigError("experts_total must be >= 1");
        if (experts_total % devices != 0)
            throw ConfigError("experts_total must be divisible by devices (uniform placement)");
        if (topk < 1 || topk > experts_total)
            throw ConfigError("topk must be in [1, experts_total]");
        if (!(capacity_factor > 0.0)) throw ConfigError("capacity_factor must be > 0");
        if (tile_rows < 1 || tile_cols < 1) throw ConfigError("tile dims must be >= 1");
        // all dimension products must stay addressable
        const double prod = static_cast<double>(devices) * 4.0 *
                            static_cast<double>(experts_total) *
                            static_cast<double>(tokens_per_device + tile_rows) *
                            static_cast<double>(embed_dim);
        if (prod > 9e15) throw ConfigError("dimension product exceeds addressable size");
    }
};

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

/// Slots per expert: C = ceil(cf * S / E_total), always >= 1.
/// Capacity is per (source device, expert) pair; each source fills its own
/// slot range in the symmetric layout.
inline std::int64_t expert_capacity(const MoeConfig& cfg) {
    const long double q = static_cast<long double>(cfg.capacity_factor) *
                          static_cast<long double>(cfg.tokens_per_device) /
                          static_cast<long double>(cfg.experts_total);
    // guard against upward float fuzz on exact integer quotients
    auto c = static_cast<std::int64_t>(std::ceil(q - 1e-9L));
    return c < 1 ? 1 : c;
}

/// Smallest multiple of the tile height bM that holds C slots.
inline std::int64_t padded_capacity(std::int64_t capacity, std::int64_t tile_rows) {
    return ceil_div(capacity, tile_rows) * tile_rows;
}

/// Dense row-major FP32 matrix.
struct TokenMatrix {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<float> data;

    TokenMatrix() = default;
    TokenMatrix(std::int64_t r, std::int64_t c) : rows(r), cols(c), data(static_cast<std::size_t>(r * c), 0.0f) {}

    float& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * cols + c)]; }
    float at(std::int64_t r, std::int64_t c) const { return data[static_cast<std::size_t>(r * cols + c)]; }
    const float* row(std::int64_t r) const { return data.data() + r * cols; }
    float* row(std::int64_t r) { return data.data() + r * cols; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

/// One expert FFN: W1 (H x D), b1 (D), W2 (D x H), b2 (H).
struct ExpertParams {
    TokenMatrix w1;
    std::vector<float> b1;
    TokenMatrix w2;
    std::vector<float> b2;
};

/// Gating projection Wg (H x E_total). The gate is a single linear layer
/// followed by a row softmax; it has no bias or temperature.
struct GateWeights {
    TokenMatrix wg;
};

/// Full model parameters; device p owns experts [p*E_local, (p+1)*E_local).
struct ModelWeights {
    GateWeights gate;
    std::vector<ExpertParams> experts;  // size E_total
};

}  // namespace moefabric
