#pragma once

#include <algorithm>
#include <cstring>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <queue>
#include <string>
#include <vector>

#include "lnc/codec.hpp"
#include "lnc/common.hpp"
#include "lnc/dataset.hpp"
#include "lnc/distance.hpp"
#include "lnc/graph.hpp"
#include "lnc/io.hpp"
#include "lnc/kmeans.hpp"
#include "lnc/opq.hpp"
#include "lnc/pq.hpp"

namespace lnc {

/// Enumerates pairs (i, j) of two ascending sequences by non-decreasing
/// a[i] + b[j] (multi-sequence algorithm). Ties come out by (i, j).
class MultiSequence {
public:
    MultiSequence(std::span<const float> a, std::span<const float> b) : a_(a), b_(b) {
        seen_.assign(a.size() * b.size(), 0);
        if (!a.empty() && !b.empty()) {
            push(0, 0);
        }
    }

    bool next(std::size_t& i, std::size_t& j, float& cost) {
        if (heap_.empty()) {
            return false;
        }
        const Item top = heap_.top();
        heap_.pop();
        i = top.i;
        j = top.j;
        cost = top.cost;
        if (i + 1 < a_.size()) {
            push(i + 1, j);
        }
        if (j + 1 < b_.size()) {
            push(i, j + 1);
        }
        return true;
    }

private:
    struct Item {
        float cost;
        std::uint32_t i, j;
        friend bool operator>(const Item& x, const Item& y) {
            if (x.cost != y.cost) {
                return x.cost > y.cost;
            }
            return x.i != y.i ? x.i > y.i : x.j > y.j;
        }
    };

    void push(std::size_t i, std::size_t j) {
        auto& s = seen_[i * b_.size() + j];
        if (s) {
            return;
        }
        s = 1;
        heap_.push({a_[i] + b_[j], static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)});
    }

    std::span<const float> a_, b_;
    std::vector<std::uint8_t> seen_;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> heap_;
};

struct ImiConfig {
    std::size_t K = 1024;
    /// Residual code: "none" (exact distances), "PQ<m>" or "OPQ<m>" (the
    /// rotation is then applied to whole vectors before everything else).
    std::string fine = "none";
    std::size_t kmeans_iters = 25;
    std::size_t max_points_per_centroid = 64;
    /// Refuse K^2 beyond this many lists.
    std::size_t max_lists = std::size_t{1} << 24;
    std::uint64_t seed = 1234;
};

/// Inverted multi-index: each vector lives in cell (c1, c2) of its nearest
/// centroids for the two halves; searches visit cells in increasing
/// d1[c1] + d2[c2] and scan their lists until T codes were compared.
class ImiIndex {
public:
    ImiIndex() = default;

    std::size_t K() const { return K_; }
    std::size_t dim() const { return dim_; }
    std::size_t size() const { return ids_.size(); }
    bool exact() const { return m_ == 0; }
    std::size_t code_size() const { return exact() ? 4 * dim_ : pq_.code_size(); }
    std::size_t list_size(std::size_t cell) const { return offsets_[cell + 1] - offsets_[cell]; }
    std::span<const idx_t> list(std::size_t cell) const {
        return {ids_.data() + offsets_[cell], list_size(cell)};
    }
    const KMeansCodebook& codebook(int half) const { return half == 0 ? cb1_ : cb2_; }
    /// Residual quantizer; meaningful only when !exact().
    const ProductQuantizer& fine() const { return pq_; }

    /// x in the space the centroids live in (rotated when the fine code is OPQ).
    void to_internal(const float* x, float* y) const {
        std::copy_n(x, dim_, y);
        rotate(y);
    }

    static ImiIndex build(const VectorSet& learn, const VectorSet& base, const ImiConfig& cfg) {
        detail::require(learn.dim() == base.dim(), "imi: learn and base dimensions differ");
        detail::require(base.dim() % 2 == 0, "imi: dimension must be even, got ", base.dim());
        detail::require(cfg.K >= 1 && cfg.K * cfg.K <= cfg.max_lists, "imi: K^2 = ", cfg.K * cfg.K,
                        " lists exceeds the guard of ", cfg.max_lists);
        ImiIndex idx;
        idx.K_ = cfg.K;
        idx.dim_ = base.dim();
        idx.half_ = base.dim() / 2;
        const std::size_t d = idx.dim_;
        const std::size_t h = idx.half_;

        bool rotate = false;
        if (cfg.fine != "none") {
            const auto spec = CodecSpec::parse(cfg.fine);
            detail::require(spec.kind == CodecSpec::Kind::quantized && !spec.coarse && spec.fine.bits == 8,
                            "imi: fine code must be none, PQ<m> or OPQ<m>, got ", cfg.fine);
            detail::require(spec.fine.m % 2 == 0 && d % spec.fine.m == 0, "imi: fine m=", spec.fine.m,
                            " must be even and divide the dimension ", d);
            idx.m_ = spec.fine.m;
            rotate = spec.fine.rotate;
        }

        VectorSet L = learn;
        if (rotate) {
            OpqOptions oo;
            oo.seed = derive_seed(cfg.seed, 1);
            auto opq = opq_train(learn.data().data(), learn.size(), d, idx.m_, 8, oo);
            idx.rotation_ = std::move(opq.rotation);
            apply_rotation(idx.rotation_, learn.data().data(), learn.size(), L.data().data());
        }

        auto halves = [&](const VectorSet& s, std::size_t which) {
            std::vector<float> out(s.size() * h);
            for (std::size_t i = 0; i < s.size(); ++i) {
                std::copy_n(s.ptr(i) + which * h, h, out.data() + i * h);
            }
            return out;
        };
        for (std::size_t which = 0; which < 2; ++which) {
            const auto part = halves(L, which);
            KMeansOptions ko;
            ko.iters = cfg.kmeans_iters;
            ko.seed = derive_seed(cfg.seed, 10 + which);
            ko.max_points_per_centroid = cfg.max_points_per_centroid;
            (which == 0 ? idx.cb1_ : idx.cb2_) = kmeans_train(part.data(), L.size(), h, cfg.K, ko).codebook;
        }

        if (idx.m_ > 0) {
            VectorSet resid = L;
            idx.residuals(resid);
            idx.pq_ = ProductQuantizer(d, idx.m_, 8);
            PQTrainOptions po;
            po.seed = derive_seed(cfg.seed, 2);
            idx.pq_.train(resid.data().data(), resid.size(), po);
            idx.precompute_cross_tables();
        }

        // assign and encode the base
        VectorSet B = base;
        if (rotate) {
            apply_rotation(idx.rotation_, base.data().data(), base.size(), B.data().data());
        }
        const std::size_t n = base.size();
        std::vector<idx_t> l1(n), l2(n);
        {
            const auto p1 = halves(B, 0);
            assign_nearest(p1.data(), n, idx.cb1_.centroids.data(), cfg.K, h, l1.data(), nullptr);
            const auto p2 = halves(B, 1);
            assign_nearest(p2.data(), n, idx.cb2_.centroids.data(), cfg.K, h, l2.data(), nullptr);
        }
        std::vector<std::uint64_t> cell(n);
        idx.offsets_.assign(cfg.K * cfg.K + 1, 0);
        for (std::size_t i = 0; i < n; ++i) {
            cell[i] = static_cast<std::uint64_t>(l1[i]) * cfg.K + l2[i];
            ++idx.offsets_[cell[i] + 1];
        }
        std::partial_sum(idx.offsets_.begin(), idx.offsets_.end(), idx.offsets_.begin());
        std::vector<std::uint64_t> fill(idx.offsets_.begin(), idx.offsets_.end() - 1);
        idx.ids_.resize(n);
        const std::size_t cs = idx.code_size();
        idx.codes_.resize(n * cs);
        std::vector<float> r(d);
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint64_t pos = fill[cell[i]]++;
            idx.ids_[pos] = static_cast<idx_t>(i);
            if (idx.exact()) {
                std::memcpy(idx.codes_.data() + pos * cs, B.ptr(i), cs);
            } else {
                idx.residual(B.ptr(i), l1[i], l2[i], r.data());
                idx.pq_.encode(r.data(), idx.codes_.data() + pos * cs);
            }
        }
        return idx;
    }

    /// Cell of a vector: (nearest half-1 centroid, nearest half-2 centroid).
    std::pair<idx_t, idx_t> assign(const float* x) const {
        std::vector<float> y(x, x + dim_);
        rotate(y.data());
        return {cb1_.assign(y.data()), cb2_.assign(y.data() + half_)};
    }

    /// Cells in visiting order for query q: (cell id, d1 + d2), at most `limit`.
    std::vector<std::pair<std::size_t, float>> cell_order(const float* q, std::size_t limit) const {
        Prepared p = prepare(q);
        MultiSequence seq(p.s1, p.s2);
        std::vector<std::pair<std::size_t, float>> out;
        std::size_t i = 0, j = 0;
        float cost = 0.f;
        while (out.size() < limit && seq.next(i, j, cost)) {
            out.emplace_back(static_cast<std::size_t>(p.o1[i]) * K_ + p.o2[j], cost);
        }
        return out;
    }

    std::vector<Neighbor> search(const float* q, std::size_t T, std::size_t k, VisitStats* stats = nullptr) const {
        detail::require(size() > 0, "search on an empty inverted multi-index");
        detail::require(k >= 1 && T >= k, "imi search: need 1 <= k <= T");
        VisitStats local;
        VisitStats& st = stats ? *stats : local;
        st = VisitStats{};
        Prepared p = prepare(q);
        const float* y = p.query.data();
        std::vector<float> qtab;
        if (!exact()) {
            // ||r||^2 - 2 <q, r> per sub-quantizer entry
            qtab.resize(m_ * 256);
            pq_.compute_inner_product_table(y, qtab.data());
            for (std::size_t e = 0; e < qtab.size(); ++e) {
                qtab[e] = pq_norms_[e] - 2.f * qtab[e];
            }
        }
        detail::TopK top(k);
        MultiSequence seq(p.s1, p.s2);
        std::size_t i = 0, j = 0, evals = 0;
        float cell_dist = 0.f;
        const std::size_t cs = code_size();
        const std::size_t per_half = m_ / 2;
        while (evals < T && seq.next(i, j, cell_dist)) {
            const idx_t c1 = p.o1[i], c2 = p.o2[j];
            const std::size_t cell = static_cast<std::size_t>(c1) * K_ + c2;
            ++st.hops;
            const float* x1 = exact() ? nullptr : cross_.data() + static_cast<std::size_t>(c1) * per_half * 256;
            const float* x2 = exact() ? nullptr
                                      : cross_.data() + (K_ + static_cast<std::size_t>(c2)) * per_half * 256;
            for (std::uint64_t pos = offsets_[cell]; pos < offsets_[cell + 1] && evals < T; ++pos) {
                const std::uint8_t* code = codes_.data() + pos * cs;
                float dist;
                if (exact()) {
                    dist = l2sqr(y, reinterpret_cast<const float*>(code), dim_);
                } else {
                    dist = cell_dist;
                    for (std::size_t s = 0; s < per_half; ++s) {
                        dist += qtab[s * 256 + code[s]] + x1[s * 256 + code[s]];
                    }
                    for (std::size_t s = 0; s < per_half; ++s) {
                        const std::size_t sj = per_half + s;
                        dist += qtab[sj * 256 + code[sj]] + x2[s * 256 + code[sj]];
                    }
                }
                ++evals;
                top.push(dist, ids_[pos]);
            }
        }
        st.base_distance_evals = evals;
        return std::move(top).sorted();
    }

    // LCM1 layout: magic, int32 K, dim, fine m, rotation flag, then float32
    // rotation (if any), the two half codebooks, the fine codebooks, the
    // uint64 list offsets, the ids and the codes.
    void save(std::ostream& os) const {
        BinaryWriter w(os);
        w.magic("LCM1");
        w.i32(static_cast<std::int64_t>(K_));
        w.i32(static_cast<std::int64_t>(dim_));
        w.i32(static_cast<std::int64_t>(m_));
        w.i32(rotation_.size() > 0 ? 1 : 0);
        if (rotation_.size() > 0) {
            w.array(std::span<const float>(rotation_.data(), static_cast<std::size_t>(rotation_.size())));
        }
        w.array(std::span<const float>(cb1_.centroids));
        w.array(std::span<const float>(cb2_.centroids));
        w.array(std::span<const float>(m_ > 0 ? pq_.centroids() : std::vector<float>{}));
        w.array(std::span<const std::uint64_t>(offsets_));
        w.array(std::span<const idx_t>(ids_));
        w.array(std::span<const std::uint8_t>(codes_));
        w.check();
    }

    static ImiIndex load(std::istream& is) {
        BinaryReader r(is);
        r.expect_magic("LCM1");
        ImiIndex idx;
        const auto K = r.i32();
        const auto d = r.i32();
        const auto m = r.i32();
        const auto rot = r.i32();
        if (K <= 0 || d <= 0 || d % 2 != 0 || m < 0 || (m > 0 && d % m != 0)) {
            throw FormatError("corrupt inverted multi-index header");
        }
        idx.K_ = static_cast<std::size_t>(K);
        idx.dim_ = static_cast<std::size_t>(d);
        idx.half_ = idx.dim_ / 2;
        idx.m_ = static_cast<std::size_t>(m);
        if (rot) {
            auto v = r.array<float>();
            if (v.size() != idx.dim_ * idx.dim_) {
                throw FormatError("rotation block has wrong size");
            }
            idx.rotation_ = ConstRowMap(v.data(), d, d);
        }
        auto load_cb = [&](KMeansCodebook& cb) {
            cb.k = idx.K_;
            cb.dim = idx.half_;
            cb.centroids = r.array<float>();
            if (cb.centroids.size() != cb.k * cb.dim) {
                throw FormatError("half codebook has wrong size");
            }
        };
        load_cb(idx.cb1_);
        load_cb(idx.cb2_);
        auto fine = r.array<float>();
        if (idx.m_ > 0) {
            idx.pq_ = ProductQuantizer(idx.dim_, idx.m_, 8);
            if (fine.size() != idx.pq_.centroids().size()) {
                throw FormatError("fine codebook has wrong size");
            }
            idx.pq_.centroids() = std::move(fine);
            idx.precompute_cross_tables();
        }
        idx.offsets_ = r.array<std::uint64_t>();
        idx.ids_ = r.array<idx_t>();
        idx.codes_ = r.array<std::uint8_t>();
        if (idx.offsets_.size() != idx.K_ * idx.K_ + 1 || idx.offsets_.back() != idx.ids_.size() ||
            idx.codes_.size() != idx.ids_.size() * idx.code_size()) {
            throw FormatError("inverted lists are inconsistent");
        }
        return idx;
    }

private:
    struct Prepared {
        std::vector<float> query;
        std::vector<float> s1, s2;  // sorted half distances
        std::vector<idx_t> o1, o2;  // centroid ids in that order
    };

    void rotate(float* y) const {
        if (rotation_.size() == 0) {
            return;
        }
        std::vector<float> t(y, y + dim_);
        apply_rotation(rotation_, t.data(), 1, y);
    }

    Prepared prepare(const float* q) const {
        Prepared p;
        p.query.assign(q, q + dim_);
        rotate(p.query.data());
        auto sorted = [&](const KMeansCodebook& cb, const float* part, std::vector<float>& s, std::vector<idx_t>& o) {
            std::vector<Neighbor> nb(K_);
            for (std::size_t c = 0; c < K_; ++c) {
                nb[c] = {l2sqr(part, cb.ptr(c), half_), static_cast<idx_t>(c)};
            }
            std::sort(nb.begin(), nb.end());
            s.resize(K_);
            o.resize(K_);
            for (std::size_t c = 0; c < K_; ++c) {
                s[c] = nb[c].distance;
                o[c] = nb[c].id;
            }
        };
        sorted(cb1_, p.query.data(), p.s1, p.o1);
        sorted(cb2_, p.query.data() + half_, p.s2, p.o2);
        return p;
    }

    void residual(const float* y, idx_t c1, idx_t c2, float* r) const {
        for (std::size_t s = 0; s < half_; ++s) {
            r[s] = y[s] - cb1_.ptr(c1)[s];
            r[half_ + s] = y[half_ + s] - cb2_.ptr(c2)[s];
        }
    }

    void residuals(VectorSet& set) const {
        std::vector<idx_t> l1(set.size()), l2(set.size());
        std::vector<float> p(set.size() * half_);
        for (int which = 0; which < 2; ++which) {
            for (std::size_t i = 0; i < set.size(); ++i) {
                std::copy_n(set.ptr(i) + which * half_, half_, p.data() + i * half_);
            }
            const KMeansCodebook& cb = which == 0 ? cb1_ : cb2_;
            assign_nearest(p.data(), set.size(), cb.centroids.data(), K_, half_, (which == 0 ? l1 : l2).data(),
                           nullptr);
        }
        std::vector<float> r(dim_);
        for (std::size_t i = 0; i < set.size(); ++i) {
            residual(set.ptr(i), l1[i], l2[i], r.data());
            std::copy(r.begin(), r.end(), set.row(i).begin());
        }
    }

    // cross_[h][c][s][code] = 2 <centroid_h(c) sub-block s, fine centroid (s, code)>
    void precompute_cross_tables() {
        const std::size_t per_half = m_ / 2;
        const std::size_t sd = pq_.sub_dim();
        cross_.assign(2 * K_ * per_half * 256, 0.f);
        for (std::size_t which = 0; which < 2; ++which) {
            const KMeansCodebook& cb = which == 0 ? cb1_ : cb2_;
            for (std::size_t c = 0; c < K_; ++c) {
                for (std::size_t s = 0; s < per_half; ++s) {
                    const float* cpart = cb.ptr(c) + s * sd;
                    float* out = cross_.data() + ((which * K_ + c) * per_half + s) * 256;
                    for (std::size_t code = 0; code < 256; ++code) {
                        out[code] = 2.f * inner_product(cpart, pq_.centroid(which * per_half + s, code), sd);
                    }
                }
            }
        }
        pq_norms_.resize(m_ * 256);
        for (std::size_t s = 0; s < m_; ++s) {
            for (std::size_t code = 0; code < 256; ++code) {
                pq_norms_[s * 256 + code] = norm_sqr(pq_.centroid(s, code), sd);
            }
        }
    }

    std::size_t K_ = 0, dim_ = 0, half_ = 0, m_ = 0;
    RowMatrix rotation_;
    KMeansCodebook cb1_, cb2_;
    ProductQuantizer pq_;
    std::vector<float> cross_, pq_norms_;
    std::vector<std::uint64_t> offsets_;
    std::vector<idx_t> ids_;
    std::vector<std::uint8_t> codes_;
};

} // namespace lnc
