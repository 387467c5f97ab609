#pragma once

#include <Eigen/Dense>

#include <charconv>
#include <cstdint>
#include <cstring>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lnc/common.hpp"
#include "lnc/dataset.hpp"
#include "lnc/distance.hpp"
#include "lnc/io.hpp"
#include "lnc/kmeans.hpp"
#include "lnc/opq.hpp"
#include "lnc/pq.hpp"

namespace lnc {

// ---------------------------------------------------------------------------
// Codec description strings
//
//   none | SQ8 | PCA<n> | [PQ<m>x<b>+](PQ|OPQ)<m>[x<b>]
//
// e.g. "OPQ32x8", "PQ1x16+OPQ30x8", "PQ2x12+OPQ13x8". A missing bit count
// means 8 bits ("OPQ40" is OPQ40x8).

struct QuantizerSpec {
    bool rotate = false;
    std::size_t m = 0;
    std::size_t bits = 8;

    std::size_t code_size() const { return (m * bits + 7) / 8; }
    std::string str() const {
        return std::string(rotate ? "OPQ" : "PQ") + std::to_string(m) + "x" + std::to_string(bits);
    }
    friend bool operator==(const QuantizerSpec&, const QuantizerSpec&) = default;
};

struct CodecSpec {
    enum class Kind : std::int32_t { flat = 0, scalar8 = 1, pca = 2, quantized = 3 };

    Kind kind = Kind::flat;
    std::size_t pca_dims = 0;
    std::optional<QuantizerSpec> coarse;
    QuantizerSpec fine;

    static CodecSpec parse(std::string_view text);

    std::string str() const {
        switch (kind) {
        case Kind::flat: return "none";
        case Kind::scalar8: return "SQ8";
        case Kind::pca: return "PCA" + std::to_string(pca_dims);
        case Kind::quantized: return (coarse ? coarse->str() + "+" : std::string()) + fine.str();
        }
        return {};
    }

    std::size_t code_size(std::size_t dim) const {
        switch (kind) {
        case Kind::flat: return 4 * dim;
        case Kind::scalar8: return dim;
        case Kind::pca: return 4 * pca_dims;
        case Kind::quantized: return (coarse ? coarse->code_size() : 0) + fine.code_size();
        }
        return 0;
    }
};

namespace detail {

inline std::size_t parse_uint(std::string_view s, std::string_view whole) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    require(ec == std::errc() && p == s.data() + s.size() && !s.empty(), "bad codec spec '", whole, "'");
    return v;
}

inline QuantizerSpec parse_quantizer(std::string_view s, std::string_view whole) {
    QuantizerSpec q;
    if (s.starts_with("OPQ")) {
        q.rotate = true;
        s.remove_prefix(3);
    } else if (s.starts_with("PQ")) {
        s.remove_prefix(2);
    } else {
        fail("bad codec spec '", whole, "': expected PQ or OPQ");
    }
    const auto x = s.find('x');
    q.m = parse_uint(s.substr(0, x), whole);
    q.bits = x == std::string_view::npos ? 8 : parse_uint(s.substr(x + 1), whole);
    require(q.m > 0, "bad codec spec '", whole, "': m must be positive");
    require(q.bits == 8 || q.bits == 12 || q.bits == 14 || q.bits == 16, "bad codec spec '", whole,
            "': bits must be one of 8, 12, 14, 16");
    return q;
}

} // namespace detail

inline CodecSpec CodecSpec::parse(std::string_view text) {
    CodecSpec s;
    if (text == "none" || text == "flat" || text == "Flat") {
        s.kind = Kind::flat;
        return s;
    }
    if (text == "SQ8" || text == "scalar") {
        s.kind = Kind::scalar8;
        return s;
    }
    if (text.starts_with("PCA")) {
        s.kind = Kind::pca;
        s.pca_dims = detail::parse_uint(text.substr(3), text);
        detail::require(s.pca_dims > 0, "bad codec spec '", text, "'");
        return s;
    }
    s.kind = Kind::quantized;
    const auto plus = text.find('+');
    if (plus != std::string_view::npos) {
        auto c = detail::parse_quantizer(text.substr(0, plus), text);
        detail::require(!c.rotate, "bad codec spec '", text, "': the coarse level is a plain PQ");
        detail::require(c.m == 1 || c.m == 2, "bad codec spec '", text, "': coarse level must be PQ1xB or PQ2xB");
        s.coarse = c;
        s.fine = detail::parse_quantizer(text.substr(plus + 1), text);
    } else {
        s.fine = detail::parse_quantizer(text, text);
    }
    return s;
}

/// Build a two-level spec that spends exactly `bytes` per vector, the fine
/// level taking what the coarse level leaves (8-bit sub-quantizers).
inline CodecSpec codec_spec_for_budget(const std::optional<QuantizerSpec>& coarse, std::size_t bytes, bool rotate = true) {
    CodecSpec s;
    s.kind = CodecSpec::Kind::quantized;
    s.coarse = coarse;
    const std::size_t coarse_bytes = coarse ? coarse->code_size() : 0;
    detail::require(bytes > coarse_bytes, "byte budget ", bytes, " is smaller than the coarse code size ",
                    coarse_bytes);
    s.fine = QuantizerSpec{rotate, bytes - coarse_bytes, 8};
    return s;
}

struct CodecTrainOptions {
    std::uint64_t seed = 1234;
    std::size_t kmeans_iters = 25;
    std::size_t opq_iters = 20;
    std::size_t opq_max_train_points = 65536;
    /// Train 16-bit coarse codebooks with plain k-means instead of two-stage.
    bool coarse_exact = false;
};

class Codec;

/// Per-query distance evaluator: ||q - x||^2 for the vector x a code stands
/// for, measured in the codec's internal (padded, rotated) space.
class AdcTable {
public:
    float distance(const std::uint8_t* code) const;

private:
    friend class Codec;
    const Codec* codec_ = nullptr;
    std::vector<float> query_;       // internal-space query (flat / PCA projection)
    std::vector<float> fine_table_;  // per sub-quantizer entries
    std::vector<float> coarse_table_;
    float constant_ = 0.f;
    mutable std::vector<float> scratch_;
};

/// Vector codec: identity, 8-bit scalar, PCA, or a one/two-level product
/// quantizer preceded by an optional learned rotation. Two-level codes store
/// the coarse code bytes followed by the fine code bytes; the fine level
/// encodes the residual in the rotated space.
class Codec {
public:
    Codec() = default;

    static Codec train(const CodecSpec& spec, const VectorSet& learn, const CodecTrainOptions& opt = {});

    const CodecSpec& spec() const { return spec_; }
    std::size_t dim() const { return dim_; }
    /// Dimension of the internal space (PQ dims are padded to a multiple of m).
    std::size_t internal_dim() const { return spec_.kind == CodecSpec::Kind::pca ? spec_.pca_dims : padded_; }
    std::size_t code_size() const { return code_size_; }
    bool has_coarse() const { return coarse_.has_value(); }
    const RowMatrix& rotation() const { return rotation_; }
    const ProductQuantizer& fine() const { return fine_; }
    const ProductQuantizer* coarse() const { return coarse_ ? &*coarse_ : nullptr; }

    /// Replace the fine codebooks (same shape), e.g. to inspect the coarse level alone.
    void set_fine_centroids(std::vector<float> centroids) {
        detail::require(spec_.kind == CodecSpec::Kind::quantized, "codec has no fine quantizer");
        detail::require(centroids.size() == fine_.centroids().size(), "fine codebook size mismatch");
        fine_.centroids() = std::move(centroids);
        finalize();
    }

    /// Internal-space image of an input vector (pad + rotate, or PCA projection).
    void to_internal(const float* x, float* y) const {
        switch (spec_.kind) {
        case CodecSpec::Kind::flat:
        case CodecSpec::Kind::scalar8:
            std::copy_n(x, dim_, y);
            return;
        case CodecSpec::Kind::pca:
            for (std::size_t k = 0; k < spec_.pca_dims; ++k) {
                float s = 0.f;
                const float* p = components_.data() + k * dim_;
                for (std::size_t j = 0; j < dim_; ++j) {
                    s += p[j] * (x[j] - mean_[j]);
                }
                y[k] = s;
            }
            return;
        case CodecSpec::Kind::quantized: {
            if (!rotated_) {
                std::copy_n(x, dim_, y);
                std::fill(y + dim_, y + padded_, 0.f);
                return;
            }
            for (std::size_t r = 0; r < padded_; ++r) {
                y[r] = inner_product(rotation_.data() + r * padded_, x, dim_);
            }
            return;
        }
        }
    }

    void from_internal(const float* y, float* x) const {
        switch (spec_.kind) {
        case CodecSpec::Kind::flat:
        case CodecSpec::Kind::scalar8:
            std::copy_n(y, dim_, x);
            return;
        case CodecSpec::Kind::pca:
            std::copy(mean_.begin(), mean_.end(), x);
            for (std::size_t k = 0; k < spec_.pca_dims; ++k) {
                const float* p = components_.data() + k * dim_;
                for (std::size_t j = 0; j < dim_; ++j) {
                    x[j] += y[k] * p[j];
                }
            }
            return;
        case CodecSpec::Kind::quantized:
            if (!rotated_) {
                std::copy_n(y, dim_, x);
                return;
            }
            // x = R^T y, truncated to the input dimension
            std::fill_n(x, dim_, 0.f);
            for (std::size_t r = 0; r < padded_; ++r) {
                const float yr = y[r];
                const float* row = rotation_.data() + r * padded_;
                for (std::size_t j = 0; j < dim_; ++j) {
                    x[j] += yr * row[j];
                }
            }
            return;
        }
    }

    void encode(const float* x, std::uint8_t* code) const { encode_batch(x, 1, code); }

    void encode_batch(const float* x, std::size_t n, std::uint8_t* codes) const {
        const std::size_t id = internal_dim();
        constexpr std::size_t block = 4096;
        std::vector<float> y;
        for (std::size_t b0 = 0; b0 < n; b0 += block) {
            const std::size_t nb = std::min(block, n - b0);
            y.resize(nb * id);
            if (spec_.kind == CodecSpec::Kind::quantized && rotated_) {
                std::vector<float> padded(nb * padded_, 0.f);
                for (std::size_t i = 0; i < nb; ++i) {
                    std::copy_n(x + (b0 + i) * dim_, dim_, padded.data() + i * padded_);
                }
                apply_rotation(rotation_, padded.data(), nb, y.data());
            } else {
                for (std::size_t i = 0; i < nb; ++i) {
                    to_internal(x + (b0 + i) * dim_, y.data() + i * id);
                }
            }
            encode_internal(y.data(), nb, codes + b0 * code_size_);
        }
    }

    /// Reconstruction in the internal space.
    void decode_internal(const std::uint8_t* code, float* y) const {
        switch (spec_.kind) {
        case CodecSpec::Kind::flat:
            std::memcpy(y, code, dim_ * sizeof(float));
            return;
        case CodecSpec::Kind::scalar8:
            for (std::size_t j = 0; j < dim_; ++j) {
                y[j] = sq_min_[j] + sq_step_[j] * static_cast<float>(code[j]);
            }
            return;
        case CodecSpec::Kind::pca:
            std::memcpy(y, code, spec_.pca_dims * sizeof(float));
            return;
        case CodecSpec::Kind::quantized:
            fine_.decode(code + coarse_bytes_, y);
            if (coarse_) {
                std::vector<float> c(padded_);
                coarse_->decode(code, c.data());
                for (std::size_t j = 0; j < padded_; ++j) {
                    y[j] += c[j];
                }
            }
            return;
        }
    }

    /// Coarse-level reconstruction only (internal space); zero without a coarse level.
    void decode_coarse_internal(const std::uint8_t* code, float* y) const {
        if (coarse_) {
            coarse_->decode(code, y);
        } else {
            std::fill_n(y, internal_dim(), 0.f);
        }
    }

    /// Reconstruction in the input space.
    void decode(const std::uint8_t* code, float* x) const {
        std::vector<float> y(internal_dim());
        decode_internal(code, y.data());
        from_internal(y.data(), x);
    }

    void decode_batch(const std::uint8_t* codes, std::size_t n, float* x) const {
        std::vector<float> y(internal_dim());
        for (std::size_t i = 0; i < n; ++i) {
            decode_internal(codes + i * code_size_, y.data());
            from_internal(y.data(), x + i * dim_);
        }
    }

    AdcTable adc_table(const float* q) const;

    void save(std::ostream& os) const;
    static Codec load(std::istream& is);

private:
    friend class AdcTable;

    void encode_internal(const float* y, std::size_t n, std::uint8_t* codes) const {
        switch (spec_.kind) {
        case CodecSpec::Kind::flat:
            std::memcpy(codes, y, n * dim_ * sizeof(float));
            return;
        case CodecSpec::Kind::scalar8:
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < dim_; ++j) {
                    float v = 0.f;
                    if (sq_step_[j] > 0.f) {
                        v = std::round((y[i * dim_ + j] - sq_min_[j]) / sq_step_[j]);
                    }
                    codes[i * dim_ + j] = static_cast<std::uint8_t>(std::clamp(v, 0.f, 255.f));
                }
            }
            return;
        case CodecSpec::Kind::pca:
            std::memcpy(codes, y, n * spec_.pca_dims * sizeof(float));
            return;
        case CodecSpec::Kind::quantized: {
            if (!coarse_) {
                std::vector<std::uint8_t> tmp(n * fine_.code_size());
                fine_.encode_batch(y, n, tmp.data());
                for (std::size_t i = 0; i < n; ++i) {
                    std::memcpy(codes + i * code_size_, tmp.data() + i * fine_.code_size(), fine_.code_size());
                }
                return;
            }
            std::vector<std::uint8_t> ccodes(n * coarse_bytes_);
            coarse_->encode_batch(y, n, ccodes.data());
            std::vector<float> resid(n * padded_);
            std::vector<float> c(padded_);
            for (std::size_t i = 0; i < n; ++i) {
                coarse_->decode(ccodes.data() + i * coarse_bytes_, c.data());
                for (std::size_t j = 0; j < padded_; ++j) {
                    resid[i * padded_ + j] = y[i * padded_ + j] - c[j];
                }
            }
            std::vector<std::uint8_t> fcodes(n * fine_.code_size());
            fine_.encode_batch(resid.data(), n, fcodes.data());
            for (std::size_t i = 0; i < n; ++i) {
                std::memcpy(codes + i * code_size_, ccodes.data() + i * coarse_bytes_, coarse_bytes_);
                std::memcpy(codes + i * code_size_ + coarse_bytes_, fcodes.data() + i * fine_.code_size(),
                            fine_.code_size());
            }
            return;
        }
        }
    }

    void finalize() {
        code_size_ = spec_.code_size(dim_);
        coarse_bytes_ = coarse_ ? coarse_->code_size() : 0;
        if (coarse_) {
            coarse_norms_.assign(coarse_->m() * coarse_->ksub(), 0.f);
            for (std::size_t s = 0; s < coarse_->m(); ++s) {
                for (std::size_t c = 0; c < coarse_->ksub(); ++c) {
                    coarse_norms_[s * coarse_->ksub() + c] = norm_sqr(coarse_->centroid(s, c), coarse_->sub_dim());
                }
            }
        }
        if (spec_.kind == CodecSpec::Kind::quantized) {
            fine_norms_.assign(fine_.m() * fine_.ksub(), 0.f);
            for (std::size_t j = 0; j < fine_.m(); ++j) {
                for (std::size_t c = 0; c < fine_.ksub(); ++c) {
                    fine_norms_[j * fine_.ksub() + c] = norm_sqr(fine_.centroid(j, c), fine_.sub_dim());
                }
            }
        }
    }

    CodecSpec spec_;
    std::size_t dim_ = 0;
    std::size_t padded_ = 0;
    std::size_t code_size_ = 0;
    std::size_t coarse_bytes_ = 0;
    bool rotated_ = false;
    RowMatrix rotation_;
    std::optional<ProductQuantizer> coarse_;
    ProductQuantizer fine_;
    std::vector<float> coarse_norms_, fine_norms_;
    std::vector<float> sq_min_, sq_step_;
    std::vector<float> mean_, components_; // PCA: pca_dims x dim
};

// ---------------------------------------------------------------------------

inline Codec Codec::train(const CodecSpec& spec, const VectorSet& learn, const CodecTrainOptions& opt) {
    detail::require(!learn.empty(), "codec training needs a non-empty learn set");
    Codec c;
    c.spec_ = spec;
    c.dim_ = learn.dim();
    c.padded_ = learn.dim();
    const std::size_t n = learn.size();
    const std::size_t d = learn.dim();

    switch (spec.kind) {
    case CodecSpec::Kind::flat:
        break;
    case CodecSpec::Kind::scalar8: {
        c.sq_min_.assign(d, std::numeric_limits<float>::infinity());
        std::vector<float> mx(d, -std::numeric_limits<float>::infinity());
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                c.sq_min_[j] = std::min(c.sq_min_[j], learn[i][j]);
                mx[j] = std::max(mx[j], learn[i][j]);
            }
        }
        c.sq_step_.resize(d);
        for (std::size_t j = 0; j < d; ++j) {
            c.sq_step_[j] = (mx[j] - c.sq_min_[j]) / 255.f;
        }
        break;
    }
    case CodecSpec::Kind::pca: {
        detail::require(spec.pca_dims <= d, "PCA", spec.pca_dims, " exceeds the input dimension ", d);
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                mean[static_cast<Eigen::Index>(j)] += learn[i][j];
            }
        }
        mean /= static_cast<double>(n);
        ConstRowMap xm(learn.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
        Eigen::MatrixXd centered = xm.cast<double>().rowwise() - mean.transpose();
        Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
        c.mean_.resize(d);
        for (std::size_t j = 0; j < d; ++j) {
            c.mean_[j] = static_cast<float>(mean[static_cast<Eigen::Index>(j)]);
        }
        c.components_.resize(spec.pca_dims * d);
        // eigenvalues come in increasing order
        for (std::size_t k = 0; k < spec.pca_dims; ++k) {
            const auto col = static_cast<Eigen::Index>(d - 1 - k);
            for (std::size_t j = 0; j < d; ++j) {
                c.components_[k * d + j] = static_cast<float>(eig.eigenvectors()(static_cast<Eigen::Index>(j), col));
            }
        }
        break;
    }
    case CodecSpec::Kind::quantized: {
        const std::size_t m = spec.fine.m;
        std::size_t padded = (d + m - 1) / m * m;
        if (spec.coarse) {
            const std::size_t cm = spec.coarse->m;
            while (padded % cm != 0) {
                padded += m;
            }
        }
        c.padded_ = padded;
        std::vector<float> x(n * padded, 0.f);
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(learn.ptr(i), d, x.data() + i * padded);
        }

        PQTrainOptions po;
        po.iters = opt.kmeans_iters;
        po.exact_large = opt.coarse_exact;

        std::vector<float> target = x; // what the fine level learns on
        if (spec.coarse) {
            c.coarse_ = ProductQuantizer(padded, spec.coarse->m, spec.coarse->bits);
            po.seed = derive_seed(opt.seed, 1);
            po.max_points_per_centroid = 64;
            c.coarse_->train(x.data(), n, po);
            std::vector<std::uint8_t> cc(n * c.coarse_->code_size());
            c.coarse_->encode_batch(x.data(), n, cc.data());
            std::vector<float> rec(padded);
            for (std::size_t i = 0; i < n; ++i) {
                c.coarse_->decode(cc.data() + i * c.coarse_->code_size(), rec.data());
                for (std::size_t j = 0; j < padded; ++j) {
                    target[i * padded + j] -= rec[j];
                }
            }
        }

        OpqOptions oo;
        oo.outer_iters = spec.fine.rotate ? opt.opq_iters : 0;
        oo.pq_iters = opt.kmeans_iters;
        oo.max_train_points = opt.opq_max_train_points;
        oo.seed = derive_seed(opt.seed, 2);
        oo.pin_zero = spec.coarse.has_value();
        oo.random_init = padded > d;
        auto opq = opq_train(target.data(), n, padded, m, spec.fine.bits, oo);
        c.fine_ = std::move(opq.pq);
        c.rotation_ = std::move(opq.rotation);
        c.rotated_ = spec.fine.rotate;

        if (spec.coarse && c.rotated_) {
            // Move the coarse level into the rotated space.
            if (spec.coarse->m == 1) {
                auto& cent = c.coarse_->centroids();
                std::vector<float> rotated(cent.size());
                apply_rotation(c.rotation_, cent.data(), c.coarse_->ksub(), rotated.data());
                cent = std::move(rotated);
            } else {
                std::vector<float> y(n * padded);
                apply_rotation(c.rotation_, x.data(), n, y.data());
                po.seed = derive_seed(opt.seed, 3);
                c.coarse_->train(y.data(), n, po);
                std::vector<std::uint8_t> cc(n * c.coarse_->code_size());
                c.coarse_->encode_batch(y.data(), n, cc.data());
                std::vector<float> rec(padded);
                for (std::size_t i = 0; i < n; ++i) {
                    c.coarse_->decode(cc.data() + i * c.coarse_->code_size(), rec.data());
                    for (std::size_t j = 0; j < padded; ++j) {
                        y[i * padded + j] -= rec[j];
                    }
                }
                c.fine_.refine(y.data(), n, 4, true);
            }
        }
        break;
    }
    }
    c.finalize();
    return c;
}

inline AdcTable Codec::adc_table(const float* q) const {
    AdcTable t;
    t.codec_ = this;
    switch (spec_.kind) {
    case CodecSpec::Kind::flat:
        t.query_.assign(q, q + dim_);
        break;
    case CodecSpec::Kind::scalar8:
        t.fine_table_.resize(dim_ * 256);
        for (std::size_t j = 0; j < dim_; ++j) {
            for (std::size_t v = 0; v < 256; ++v) {
                const float diff = q[j] - (sq_min_[j] + sq_step_[j] * static_cast<float>(v));
                t.fine_table_[j * 256 + v] = diff * diff;
            }
        }
        break;
    case CodecSpec::Kind::pca: {
        t.query_.resize(spec_.pca_dims);
        to_internal(q, t.query_.data());
        // ||q - mean||^2 minus its energy inside the PCA subspace
        double full = 0.0;
        for (std::size_t j = 0; j < dim_; ++j) {
            const double v = q[j] - mean_[j];
            full += v * v;
        }
        double inside = 0.0;
        for (float v : t.query_) {
            inside += static_cast<double>(v) * v;
        }
        t.constant_ = static_cast<float>(std::max(0.0, full - inside));
        break;
    }
    case CodecSpec::Kind::quantized: {
        std::vector<float> y(padded_);
        to_internal(q, y.data());
        if (!coarse_) {
            t.fine_table_.resize(fine_.m() * fine_.ksub());
            fine_.compute_distance_table(y.data(), t.fine_table_.data());
            break;
        }
        // ||y - c - f||^2 = ||y||^2 + (||c||^2 - 2<y,c>) + (||f||^2 - 2<y,f>) + 2<c,f>
        t.constant_ = norm_sqr(y.data(), padded_);
        t.coarse_table_.resize(coarse_->m() * coarse_->ksub());
        coarse_->compute_inner_product_table(y.data(), t.coarse_table_.data());
        for (std::size_t i = 0; i < t.coarse_table_.size(); ++i) {
            t.coarse_table_[i] = coarse_norms_[i] - 2.f * t.coarse_table_[i];
        }
        t.fine_table_.resize(fine_.m() * fine_.ksub());
        fine_.compute_inner_product_table(y.data(), t.fine_table_.data());
        for (std::size_t i = 0; i < t.fine_table_.size(); ++i) {
            t.fine_table_[i] = fine_norms_[i] - 2.f * t.fine_table_[i];
        }
        t.scratch_.resize(padded_);
        break;
    }
    }
    return t;
}

inline float AdcTable::distance(const std::uint8_t* code) const {
    const Codec& c = *codec_;
    switch (c.spec_.kind) {
    case CodecSpec::Kind::flat: {
        return l2sqr(query_.data(), reinterpret_cast<const float*>(code), c.dim_);
    }
    case CodecSpec::Kind::scalar8: {
        float s = 0.f;
        for (std::size_t j = 0; j < c.dim_; ++j) {
            s += fine_table_[j * 256 + code[j]];
        }
        return s;
    }
    case CodecSpec::Kind::pca: {
        float y[256];
        const std::size_t n = c.spec_.pca_dims;
        if (n > 256) {
            std::vector<float> big(n);
            std::memcpy(big.data(), code, n * sizeof(float));
            return constant_ + l2sqr(query_.data(), big.data(), n);
        }
        std::memcpy(y, code, n * sizeof(float));
        return constant_ + l2sqr(query_.data(), y, n);
    }
    case CodecSpec::Kind::quantized: {
        if (!c.coarse_) {
            return c.fine_.lookup(fine_table_.data(), code);
        }
        const ProductQuantizer& cq = *c.coarse_;
        const ProductQuantizer& fq = c.fine_;
        float s = constant_ + cq.lookup(coarse_table_.data(), code);
        const std::uint8_t* fcode = code + c.coarse_bytes_;
        s += fq.lookup(fine_table_.data(), fcode);
        cq.decode(code, scratch_.data());
        float cross = 0.f;
        for (std::size_t j = 0; j < fq.m(); ++j) {
            cross += inner_product(scratch_.data() + j * fq.sub_dim(), fq.centroid(j, fq.subcode(fcode, j)),
                                   fq.sub_dim());
        }
        return s + 2.f * cross;
    }
    }
    return 0.f;
}

// LCQ1 layout: magic, int32 headers (dim, padded dim, kind, pca dims, coarse
// m, coarse bits, fine m, fine bits, rotated flag), the spec string, then the
// float32 payloads (rotation row-major, SQ ranges, PCA basis, centroids).
inline void Codec::save(std::ostream& os) const {
    BinaryWriter w(os);
    w.magic("LCQ1");
    w.i32(static_cast<std::int64_t>(dim_));
    w.i32(static_cast<std::int64_t>(padded_));
    w.i32(static_cast<std::int32_t>(spec_.kind));
    w.i32(static_cast<std::int64_t>(spec_.pca_dims));
    w.i32(spec_.coarse ? static_cast<std::int64_t>(spec_.coarse->m) : 0);
    w.i32(spec_.coarse ? static_cast<std::int64_t>(spec_.coarse->bits) : 0);
    w.i32(static_cast<std::int64_t>(spec_.fine.m));
    w.i32(static_cast<std::int64_t>(spec_.fine.bits));
    w.i32(rotated_ ? 1 : 0);
    w.bytes(spec_.str());
    if (rotated_) {
        w.array(std::span<const float>(rotation_.data(), static_cast<std::size_t>(rotation_.size())));
    }
    w.array(std::span<const float>(sq_min_));
    w.array(std::span<const float>(sq_step_));
    w.array(std::span<const float>(mean_));
    w.array(std::span<const float>(components_));
    if (coarse_) {
        w.array(std::span<const float>(coarse_->centroids()));
    }
    if (spec_.kind == CodecSpec::Kind::quantized) {
        w.array(std::span<const float>(fine_.centroids()));
    }
    w.check();
}

inline Codec Codec::load(std::istream& is) {
    BinaryReader r(is);
    r.expect_magic("LCQ1");
    Codec c;
    const auto dim = r.i32();
    const auto padded = r.i32();
    const auto kind = r.i32();
    const auto pca = r.i32();
    const auto cm = r.i32();
    const auto cb = r.i32();
    const auto fm = r.i32();
    const auto fb = r.i32();
    const auto rot = r.i32();
    if (dim <= 0 || padded < dim || kind < 0 || kind > 3 || pca < 0 || cm < 0 || cb < 0 || cb > 16 || fm < 0 ||
        fb < 0 || fb > 16) {
        throw FormatError("corrupt codec header");
    }
    const auto text = r.bytes();
    c.spec_ = CodecSpec::parse(text);
    if (static_cast<std::int32_t>(c.spec_.kind) != kind) {
        throw FormatError("codec header does not match its spec string");
    }
    c.dim_ = static_cast<std::size_t>(dim);
    c.padded_ = static_cast<std::size_t>(padded);
    c.rotated_ = rot != 0;
    const auto pd = static_cast<Eigen::Index>(padded);
    if (c.rotated_) {
        auto v = r.array<float>();
        if (v.size() != static_cast<std::size_t>(pd * pd)) {
            throw FormatError("rotation block has wrong size");
        }
        c.rotation_ = ConstRowMap(v.data(), pd, pd);
    } else {
        c.rotation_ = RowMatrix::Identity(pd, pd);
    }
    c.sq_min_ = r.array<float>();
    c.sq_step_ = r.array<float>();
    c.mean_ = r.array<float>();
    c.components_ = r.array<float>();
    if (cm > 0) {
        c.coarse_ = ProductQuantizer(c.padded_, static_cast<std::size_t>(cm), static_cast<std::size_t>(cb));
        auto v = r.array<float>();
        if (v.size() != c.coarse_->centroids().size()) {
            throw FormatError("coarse centroid block has wrong size");
        }
        c.coarse_->centroids() = std::move(v);
    }
    if (c.spec_.kind == CodecSpec::Kind::quantized) {
        c.fine_ = ProductQuantizer(c.padded_, static_cast<std::size_t>(fm), static_cast<std::size_t>(fb));
        auto v = r.array<float>();
        if (v.size() != c.fine_.centroids().size()) {
            throw FormatError("fine centroid block has wrong size");
        }
        c.fine_.centroids() = std::move(v);
    }
    c.finalize();
    return c;
}

} // namespace lnc
