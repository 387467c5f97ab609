#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <queue>
#include <span>
#include <vector>

#include "lnc/common.hpp"
#include "lnc/distance.hpp"
#include "lnc/io.hpp"

namespace lnc {

/// Level of a node: floor(-ln(u) / ln(ratio)) with u in (0, 1] drawn from a
/// hash of (seed, id), so the level does not depend on insertion order.
inline int assign_level(std::uint64_t seed, idx_t id, double ratio = 30.0) {
    const std::uint64_t h = mix64(seed ^ mix64(static_cast<std::uint64_t>(id) + 0x632be59bd9b4e019ULL));
    const double u = static_cast<double>((h >> 11) + 1) * 0x1.0p-53;
    const double level = std::floor(-std::log(u) / std::log(ratio));
    return static_cast<int>(std::min(level, 60.0));
}

/// Neighbor-list pruning: walk candidates in increasing distance to the base
/// node and keep one only if it is closer to the base than to every candidate
/// kept so far. `pair(a, b)` is the distance between two stored nodes.
template <typename PairDist>
std::vector<idx_t> shrink_neighbors(std::span<const Neighbor> candidates, std::size_t bound, PairDist&& pair) {
    std::vector<idx_t> kept;
    kept.reserve(std::min(bound, candidates.size()));
    for (const Neighbor& c : candidates) {
        if (kept.size() >= bound) {
            break;
        }
        bool good = true;
        for (idx_t s : kept) {
            if (!(c.distance < pair(c.id, s))) {
                good = false;
                break;
            }
        }
        if (good) {
            kept.push_back(c.id);
        }
    }
    return kept;
}

/// Storage the graph can be built on: distances from an arbitrary vector to a
/// stored node and between two stored nodes.
template <typename S>
concept GraphStorage = requires(const S& s, const float* q, idx_t a, idx_t b) {
    { s.size() } -> std::convertible_to<std::size_t>;
    { s.distance(q, a) } -> std::convertible_to<float>;
    { s.pair_distance(a, b) } -> std::convertible_to<float>;
};

/// Uncompressed row-major vectors (not owned).
class FlatStorage {
public:
    FlatStorage(const float* data, std::size_t n, std::size_t dim) : data_(data), n_(n), dim_(dim) {}

    std::size_t size() const { return n_; }
    std::size_t dim() const { return dim_; }
    const float* vector(idx_t i) const { return data_ + static_cast<std::size_t>(i) * dim_; }
    float distance(const float* q, idx_t i) const { return l2sqr(q, vector(i), dim_); }
    float pair_distance(idx_t a, idx_t b) const { return l2sqr(vector(a), vector(b), dim_); }

private:
    const float* data_;
    std::size_t n_, dim_;
};

struct GraphConfig {
    std::size_t k_base = 32;
    std::size_t k_upper = 32;
    std::size_t ef_construction = 200;
    double level_ratio = 30.0;
    std::uint64_t seed = 1234;

    void validate() const {
        detail::require(k_base >= 2, "graph: base degree k_base must be at least 2, got ", k_base);
        detail::require(k_upper >= 2, "graph: upper degree must be at least 2, got ", k_upper);
        detail::require(k_base <= 65535 && k_upper <= 65535, "graph: degree bound too large");
        detail::require(ef_construction >= 1, "graph: efConstruction must be positive");
        detail::require(level_ratio > 1.0, "graph: level ratio must exceed 1");
    }
};

struct SearchParams {
    /// Cap on base-level distance evaluations.
    std::size_t T = std::numeric_limits<std::size_t>::max();
    std::size_t ef = 64;
    std::size_t k = 10;

    void validate() const {
        detail::require(k >= 1, "search: k must be positive");
        detail::require(ef >= k, "search: ef (", ef, ") must be at least k (", k, ")");
        detail::require(T >= k, "search: T (", T, ") must be at least k (", k, ")");
    }
};

struct VisitStats {
    std::size_t base_distance_evals = 0;
    std::size_t upper_distance_evals = 0;
    std::size_t hops = 0;
};

/// Layered proximity graph. Level 0 links every node; a node of level L also
/// has link lists at levels 1..L. Links are ids only; distances come from the
/// storage passed to build and search.
///
/// Build is single-writer. Searches are read-only and may run concurrently
/// once the build is finished, but not during it.
class LayeredGraph {
public:
    LayeredGraph() = default;
    explicit LayeredGraph(GraphConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const GraphConfig& config() const { return cfg_; }
    std::size_t size() const { return count_; }
    bool empty() const { return count_ == 0; }
    std::size_t capacity() const { return level_.size(); }
    idx_t entry_point() const { return entry_; }
    int max_level() const { return max_level_; }
    bool contains(idx_t id) const { return id < level_.size() && level_[id] >= 0; }
    int level_of(idx_t id) const { return contains(id) ? level_[id] : -1; }
    std::size_t bound(int level) const { return level == 0 ? cfg_.k_base : cfg_.k_upper; }

    std::span<const idx_t> links(idx_t id, int level) const {
        if (level == 0) {
            const idx_t* p = base_.data() + static_cast<std::size_t>(id) * cfg_.k_base;
            return {p, base_count_[id]};
        }
        const idx_t* p = upper_[id].data() + static_cast<std::size_t>(level - 1) * (cfg_.k_upper + 1);
        return {p + 1, p[0]};
    }

    /// Number of nodes at each level.
    std::vector<std::size_t> level_sizes() const {
        std::vector<std::size_t> sizes(static_cast<std::size_t>(std::max(max_level_, 0) + 1), 0);
        for (auto l : level_) {
            for (int i = 0; i <= l; ++i) {
                ++sizes[static_cast<std::size_t>(i)];
            }
        }
        return sizes;
    }

    /// Insert one node. `x` is the vector on the query side of the distance
    /// computations; the node must already be present in `storage`.
    template <GraphStorage S>
    void insert(const S& storage, idx_t id, const float* x) {
        detail::require(id < storage.size(), "graph: id ", id, " is not in the storage");
        detail::require(!contains(id), "graph: duplicate id ", id);
        const int level = assign_level(cfg_.seed, id, cfg_.level_ratio);
        allocate(id, level);

        if (count_ == 1) {
            entry_ = id;
            max_level_ = level;
            return;
        }

        auto dist = [&](idx_t j) { return storage.distance(x, j); };
        auto pair = [&](idx_t a, idx_t b) { return storage.pair_distance(a, b); };

        Neighbor cur{dist(entry_), entry_};
        for (int l = max_level_; l > level; --l) {
            cur = greedy(dist, cur, l, nullptr);
        }
        for (int l = std::min(level, max_level_); l >= 0; --l) {
            auto found = search_layer(dist, cur, l, cfg_.ef_construction, kUnlimited, nullptr);
            const auto chosen = shrink_neighbors(found, bound(l), pair);
            set_links(id, l, chosen);
            for (idx_t nb : chosen) {
                add_backlink(nb, id, l, pair);
            }
            cur = found.front();
        }
        if (level > max_level_ || (level == max_level_ && id < entry_)) {
            entry_ = id;
            max_level_ = level;
        }
    }

    /// Batch insert: nodes go in by descending level (ties by id), so every
    /// upper layer is populated before the layers below it.
    template <GraphStorage S, typename VectorOf>
    void add_batch(const S& storage, std::span<const idx_t> ids, VectorOf&& vector_of) {
        std::vector<std::pair<int, idx_t>> order;
        order.reserve(ids.size());
        for (idx_t id : ids) {
            order.emplace_back(-assign_level(cfg_.seed, id, cfg_.level_ratio), id);
        }
        std::sort(order.begin(), order.end());
        for (auto [neg_level, id] : order) {
            insert(storage, id, vector_of(id));
        }
        repair_in_links(storage);
    }

    /// Pruning can leave a node without base-level in-links, unreachable by
    /// any search. Each such node is linked from the closest of its own
    /// out-neighbors, into a free slot or in place of that neighbor's farthest
    /// link whose target keeps another in-link. Returns the nodes relinked.
    template <GraphStorage S>
    std::size_t repair_in_links(const S& storage) {
        if (count_ < 2) {
            return 0;
        }
        std::vector<std::uint32_t> indeg(level_.size(), 0);
        for (std::size_t i = 0; i < level_.size(); ++i) {
            if (level_[i] >= 0) {
                for (idx_t j : links(static_cast<idx_t>(i), 0)) {
                    ++indeg[j];
                }
            }
        }
        std::size_t fixed = 0;
        for (std::size_t i = 0; i < level_.size(); ++i) {
            const auto u = static_cast<idx_t>(i);
            if (level_[i] < 0 || indeg[i] > 0) {
                continue;
            }
            std::vector<Neighbor> outs;
            for (idx_t v : links(u, 0)) {
                outs.push_back({storage.pair_distance(u, v), v});
            }
            std::sort(outs.begin(), outs.end());
            for (const Neighbor& v : outs) {
                std::vector<idx_t> nb(links(v.id, 0).begin(), links(v.id, 0).end());
                if (nb.size() < cfg_.k_base) {
                    nb.push_back(u);
                } else {
                    std::size_t worst = nb.size();
                    float worst_d = -1.f;
                    for (std::size_t t = 0; t < nb.size(); ++t) {
                        const float d = storage.pair_distance(v.id, nb[t]);
                        if (indeg[nb[t]] >= 2 && d > worst_d) {
                            worst_d = d;
                            worst = t;
                        }
                    }
                    if (worst == nb.size()) {
                        continue;
                    }
                    --indeg[nb[worst]];
                    nb[worst] = u;
                }
                set_links(v.id, 0, nb);
                ++indeg[i];
                ++fixed;
                break;
            }
        }
        return fixed;
    }

    /// Insert nodes 0..n-1 of a flat storage whose vectors are also the
    /// insertion-side vectors.
    void build(const FlatStorage& storage) {
        std::vector<idx_t> ids(storage.size());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            ids[i] = static_cast<idx_t>(i);
        }
        add_batch(storage, ids, [&](idx_t i) { return storage.vector(i); });
    }

    /// Greedy descent through the upper levels, then best-first search on the
    /// base level with beam ef. The base entry point counts as one base
    /// evaluation; the search stops once T base evaluations were made.
    /// `dist(id)` is the query-to-node distance.
    template <typename Dist>
    std::vector<Neighbor> search(Dist&& dist, const SearchParams& params, VisitStats* stats = nullptr) const {
        params.validate();
        detail::require(!empty(), "search on an empty graph");
        VisitStats local;
        VisitStats& st = stats ? *stats : local;
        st = VisitStats{};

        Neighbor cur{dist(entry_), entry_};
        if (max_level_ > 0) {
            ++st.upper_distance_evals;
            for (int l = max_level_; l > 0; --l) {
                cur = greedy(dist, cur, l, &st);
            }
        }
        auto found = search_layer(dist, cur, 0, params.ef, params.T, &st);
        if (found.size() > params.k) {
            found.resize(params.k);
        }
        return found;
    }

    template <GraphStorage S>
    std::vector<Neighbor> search(const S& storage, const float* q, const SearchParams& params,
                                 VisitStats* stats = nullptr) const {
        return search([&](idx_t j) { return storage.distance(q, j); }, params, stats);
    }

    // LCG1 layout: magic, int32 k_base, k_upper, efConstruction, capacity,
    // node count, entry point, max level, float64 level ratio, uint64 seed,
    // per-node levels (int8, -1 for absent), the base link table (k_base ids
    // per node), then per upper level the CSR offsets (uint64, one per node of
    // that level plus one) and the neighbor ids.
    void save(std::ostream& os) const {
        // capacity written is one past the highest present id
        std::size_t extent = level_.size();
        while (extent > 0 && level_[extent - 1] < 0) {
            --extent;
        }
        BinaryWriter w(os);
        w.magic("LCG1");
        w.i32(static_cast<std::int64_t>(cfg_.k_base));
        w.i32(static_cast<std::int64_t>(cfg_.k_upper));
        w.i32(static_cast<std::int64_t>(cfg_.ef_construction));
        w.i32(static_cast<std::int64_t>(extent));
        w.i32(static_cast<std::int64_t>(count_));
        w.pod(entry_);
        w.i32(max_level_);
        w.pod(cfg_.level_ratio);
        w.pod(cfg_.seed);
        w.array(std::span<const std::int8_t>(level_.data(), extent));
        // base level: fixed k_base slots per node, unused slots hold kNoId
        w.array(std::span<const idx_t>(base_.data(), extent * cfg_.k_base));
        for (int l = 1; l <= max_level_; ++l) {
            std::vector<std::uint64_t> offsets{0};
            std::vector<idx_t> ids;
            for (std::size_t i = 0; i < extent; ++i) {
                if (level_[i] >= l) {
                    const auto nb = links(static_cast<idx_t>(i), l);
                    ids.insert(ids.end(), nb.begin(), nb.end());
                    offsets.push_back(ids.size());
                }
            }
            w.array(std::span<const std::uint64_t>(offsets));
            w.array(std::span<const idx_t>(ids));
        }
        w.check();
    }

    static LayeredGraph load(std::istream& is) {
        BinaryReader r(is);
        r.expect_magic("LCG1");
        GraphConfig cfg;
        const auto kb = r.i32();
        const auto ku = r.i32();
        const auto efc = r.i32();
        const auto cap = r.i32();
        const auto count = r.i32();
        const auto entry = r.pod<idx_t>();
        const auto max_level = r.i32();
        cfg.level_ratio = r.pod<double>();
        cfg.seed = r.pod<std::uint64_t>();
        if (kb < 2 || ku < 2 || efc < 1 || cap < 0 || count < 0 || count > cap || max_level < -1 ||
            max_level > 60 || !(cfg.level_ratio > 1.0)) {
            throw FormatError("corrupt graph header");
        }
        cfg.k_base = static_cast<std::size_t>(kb);
        cfg.k_upper = static_cast<std::size_t>(ku);
        cfg.ef_construction = static_cast<std::size_t>(efc);
        LayeredGraph g(cfg);
        auto levels = r.array<std::int8_t>();
        if (levels.size() != static_cast<std::size_t>(cap)) {
            throw FormatError("graph level table has wrong size");
        }
        g.level_.assign(levels.size(), -1);
        g.base_.assign(levels.size() * cfg.k_base, kNoId);
        g.base_count_.assign(levels.size(), 0);
        g.upper_.resize(levels.size());
        std::size_t present = 0;
        for (std::size_t i = 0; i < levels.size(); ++i) {
            if (levels[i] < -1 || levels[i] > max_level) {
                throw FormatError("graph node level out of range");
            }
            if (levels[i] >= 0) {
                g.allocate(static_cast<idx_t>(i), levels[i]);
                ++present;
            }
        }
        if (present != static_cast<std::size_t>(count)) {
            throw FormatError("graph node count mismatch");
        }
        auto check_links = [&](std::span<const idx_t> nb, int l) {
            if (nb.size() > g.bound(l)) {
                throw FormatError("graph link list exceeds its degree bound");
            }
            for (idx_t j : nb) {
                if (j >= levels.size() || levels[j] < l) {
                    throw FormatError("graph link points to a missing node");
                }
            }
        };
        const auto base = r.array<idx_t>();
        if (base.size() != levels.size() * cfg.k_base) {
            throw FormatError("graph base table has wrong size");
        }
        for (std::size_t i = 0; i < levels.size(); ++i) {
            const idx_t* row = base.data() + i * cfg.k_base;
            const std::size_t n = static_cast<std::size_t>(std::find(row, row + cfg.k_base, kNoId) - row);
            if (std::find_if(row + n, row + cfg.k_base, [](idx_t j) { return j != kNoId; }) != row + cfg.k_base ||
                (levels[i] < 0 && n > 0)) {
                throw FormatError("graph base table is inconsistent");
            }
            if (levels[i] >= 0) {
                check_links({row, n}, 0);
                g.set_links(static_cast<idx_t>(i), 0, {row, n});
            }
        }
        for (int l = 1; l <= max_level; ++l) {
            const auto offsets = r.array<std::uint64_t>();
            const auto ids = r.array<idx_t>();
            std::size_t k = 0;
            if (offsets.empty() || offsets.back() != ids.size()) {
                throw FormatError("graph CSR block is inconsistent");
            }
            for (std::size_t i = 0; i < levels.size(); ++i) {
                if (levels[i] < l) {
                    continue;
                }
                if (k + 1 >= offsets.size() || offsets[k] > offsets[k + 1]) {
                    throw FormatError("graph CSR offsets are inconsistent");
                }
                std::span<const idx_t> nb(ids.data() + offsets[k], offsets[k + 1] - offsets[k]);
                check_links(nb, l);
                g.set_links(static_cast<idx_t>(i), l, nb);
                ++k;
            }
            if (k + 1 != offsets.size()) {
                throw FormatError("graph CSR offsets are inconsistent");
            }
        }
        if (count > 0 && (entry >= levels.size() || levels[entry] != max_level)) {
            throw FormatError("graph entry point is invalid");
        }
        g.entry_ = count > 0 ? entry : kNoId;
        g.max_level_ = max_level;
        return g;
    }

private:
    static constexpr std::size_t kUnlimited = std::numeric_limits<std::size_t>::max();

    struct Visited {
        std::vector<std::uint32_t> mark;
        std::uint32_t epoch = 0;

        void reset(std::size_t n) {
            if (mark.size() < n) {
                mark.resize(n, 0);
            }
            if (++epoch == 0) {
                std::fill(mark.begin(), mark.end(), 0);
                epoch = 1;
            }
        }
        bool test_and_set(idx_t i) {
            if (mark[i] == epoch) {
                return true;
            }
            mark[i] = epoch;
            return false;
        }
    };

    static Visited& visited() {
        thread_local Visited v;
        return v;
    }

    void allocate(idx_t id, int level) {
        if (id >= level_.size()) {
            const std::size_t n = static_cast<std::size_t>(id) + 1;
            const std::size_t cap = std::max(n, level_.size() + level_.size() / 2);
            level_.resize(cap, -1);
            base_.resize(cap * cfg_.k_base, kNoId);
            base_count_.resize(cap, 0);
            upper_.resize(cap);
        }
        level_[id] = static_cast<std::int8_t>(level);
        if (level > 0) {
            upper_[id].assign(static_cast<std::size_t>(level) * (cfg_.k_upper + 1), kNoId);
            for (int l = 1; l <= level; ++l) {
                upper_[id][static_cast<std::size_t>(l - 1) * (cfg_.k_upper + 1)] = 0;
            }
        }
        ++count_;
    }

    void set_links(idx_t id, int level, std::span<const idx_t> ids) {
        if (level == 0) {
            idx_t* p = base_.data() + static_cast<std::size_t>(id) * cfg_.k_base;
            std::copy(ids.begin(), ids.end(), p);
            std::fill(p + ids.size(), p + cfg_.k_base, kNoId);
            base_count_[id] = static_cast<std::uint16_t>(ids.size());
            return;
        }
        idx_t* p = upper_[id].data() + static_cast<std::size_t>(level - 1) * (cfg_.k_upper + 1);
        p[0] = static_cast<idx_t>(ids.size());
        std::copy(ids.begin(), ids.end(), p + 1);
        std::fill(p + 1 + ids.size(), p + 1 + cfg_.k_upper, kNoId);
    }

    template <typename PairDist>
    void add_backlink(idx_t node, idx_t added, int level, PairDist& pair) {
        const auto current = links(node, level);
        if (current.size() < bound(level)) {
            std::vector<idx_t> next(current.begin(), current.end());
            next.push_back(added);
            set_links(node, level, next);
            return;
        }
        std::vector<Neighbor> cand;
        cand.reserve(current.size() + 1);
        for (idx_t j : current) {
            cand.push_back({pair(node, j), j});
        }
        cand.push_back({pair(node, added), added});
        std::sort(cand.begin(), cand.end());
        const auto kept = shrink_neighbors(cand, bound(level), pair);
        set_links(node, level, kept);
    }

    template <typename Dist>
    Neighbor greedy(Dist& dist, Neighbor cur, int level, VisitStats* st) const {
        for (bool changed = true; changed;) {
            changed = false;
            if (st) {
                ++st->hops;
            }
            for (idx_t j : links(cur.id, level)) {
                const Neighbor cand{dist(j), j};
                if (st) {
                    ++st->upper_distance_evals;
                }
                if (cand < cur) {
                    cur = cand;
                    changed = true;
                }
            }
        }
        return cur;
    }

    // Best-first search on one level. Returns the ef best nodes found, sorted.
    template <typename Dist>
    std::vector<Neighbor> search_layer(Dist& dist, Neighbor entry, int level, std::size_t ef, std::size_t budget,
                                       VisitStats* st) const {
        Visited& vis = visited();
        vis.reset(level_.size());
        std::priority_queue<Neighbor, std::vector<Neighbor>, std::greater<>> frontier;
        std::priority_queue<Neighbor> best;
        std::size_t evals = 1;
        vis.test_and_set(entry.id);
        frontier.push(entry);
        best.push(entry);
        bool exhausted = evals >= budget;
        while (!frontier.empty() && !exhausted) {
            const Neighbor c = frontier.top();
            if (best.size() >= ef && best.top() < c) {
                break;
            }
            frontier.pop();
            if (st) {
                ++st->hops;
            }
            for (idx_t j : links(c.id, level)) {
                if (vis.test_and_set(j)) {
                    continue;
                }
                if (evals >= budget) {
                    exhausted = true;
                    break;
                }
                const Neighbor n{dist(j), j};
                ++evals;
                if (best.size() < ef || n < best.top()) {
                    frontier.push(n);
                    best.push(n);
                    if (best.size() > ef) {
                        best.pop();
                    }
                }
            }
        }
        if (st && level == 0) {
            st->base_distance_evals += evals;
        }
        std::vector<Neighbor> out(best.size());
        for (std::size_t i = out.size(); i-- > 0;) {
            out[i] = best.top();
            best.pop();
        }
        return out;
    }

    GraphConfig cfg_;
    std::size_t count_ = 0;
    idx_t entry_ = kNoId;
    int max_level_ = -1;
    std::vector<std::int8_t> level_;
    std::vector<idx_t> base_;
    std::vector<std::uint16_t> base_count_;
    std::vector<std::vector<idx_t>> upper_; // per node: level blocks of [count, k_upper slots]
};

} // namespace lnc
