#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <queue>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lnc/common.hpp"
#include "lnc/distance.hpp"

namespace lnc {

/// Row-major collection of `count` vectors of dimension `dim`. Ids are the row
/// indices 0..count-1.
class VectorSet {
public:
    VectorSet() = default;

    VectorSet(std::size_t dim, std::size_t count) : dim_(dim), count_(count), data_(dim * count) {}

    VectorSet(std::size_t dim, std::vector<float> data) : dim_(dim), data_(std::move(data)) {
        detail::require(dim > 0 || data_.empty(), "VectorSet: zero dimension with data");
        detail::require(dim == 0 || data_.size() % dim == 0,
                        "VectorSet: data length ", data_.size(), " is not a multiple of dim ", dim);
        count_ = dim == 0 ? 0 : data_.size() / dim;
    }

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return count_; }
    bool empty() const { return count_ == 0; }

    std::span<const float> operator[](std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
    std::span<float> row(std::size_t i) { return {data_.data() + i * dim_, dim_}; }
    const float* ptr(std::size_t i) const { return data_.data() + i * dim_; }

    const std::vector<float>& data() const { return data_; }
    std::vector<float>& data() { return data_; }

    VectorSet slice(std::size_t begin, std::size_t end) const {
        detail::require(begin <= end && end <= count_, "VectorSet::slice out of range");
        return VectorSet(dim_, std::vector<float>(data_.begin() + static_cast<std::ptrdiff_t>(begin * dim_),
                                                  data_.begin() + static_cast<std::ptrdiff_t>(end * dim_)));
    }

    VectorSet subset(std::span<const idx_t> ids) const {
        VectorSet out(dim_, ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            detail::require(ids[i] < count_, "VectorSet::subset id out of range");
            std::copy_n(ptr(ids[i]), dim_, out.row(i).data());
        }
        return out;
    }

    void append(std::span<const float> v) {
        if (dim_ == 0) {
            dim_ = v.size();
        }
        detail::require(v.size() == dim_, "VectorSet::append dimension mismatch");
        data_.insert(data_.end(), v.begin(), v.end());
        ++count_;
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
    }

    friend bool operator==(const VectorSet& a, const VectorSet& b) {
        return a.dim_ == b.dim_ && a.count_ == b.count_ &&
               std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0;
    }

private:
    std::size_t dim_ = 0;
    std::size_t count_ = 0;
    std::vector<float> data_;
};

/// Exact neighbors per query, ordered by increasing squared distance with ties
/// broken by ascending id.
struct GroundTruth {
    std::size_t query_count = 0;
    std::size_t depth = 0;
    std::vector<idx_t> ids;
    std::vector<float> distances; // empty when loaded from ivecs

    std::span<const idx_t> row(std::size_t q) const { return {ids.data() + q * depth, depth}; }
    std::span<const float> row_distances(std::size_t q) const {
        return {distances.data() + q * depth, depth};
    }
};

struct EvalMetrics {
    std::map<std::size_t, double> recall_at;
    /// Ranks larger than some returned list: the value is only a lower bound.
    std::vector<std::size_t> lower_bound_ranks;
    double mean_distance_evals = 0.0;
    double wall_time_ms_per_query = 0.0;

    bool is_lower_bound(std::size_t rank) const {
        return std::find(lower_bound_ranks.begin(), lower_bound_ranks.end(), rank) !=
               lower_bound_ranks.end();
    }
};

// ---------------------------------------------------------------------------
// fvecs / bvecs / ivecs

enum class VecFormat { fvecs, bvecs, ivecs };

inline VecFormat format_from_path(const std::string& path) {
    const auto ext = std::filesystem::path(path).extension().string();
    if (ext == ".fvecs") return VecFormat::fvecs;
    if (ext == ".bvecs") return VecFormat::bvecs;
    if (ext == ".ivecs") return VecFormat::ivecs;
    detail::fail("cannot infer vector format from extension of '", path, "'");
}

inline std::size_t element_size(VecFormat f) { return f == VecFormat::bvecs ? 1 : 4; }

struct ReadOptions {
    bool allow_empty = false;
    std::size_t max_count = std::numeric_limits<std::size_t>::max();
};

namespace detail {

// Reads raw records; calls sink(record_index, payload_bytes) for each.
template <typename Sink>
std::pair<std::size_t, std::size_t> read_records(const std::string& path, VecFormat format,
                                                 const ReadOptions& opt, Sink&& sink) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), "cannot open: ", path);
    is.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::uint64_t>(is.tellg());
    is.seekg(0);
    if (file_size == 0) {
        require(opt.allow_empty, "empty vector file: ", path);
        return {0, 0};
    }
    require(file_size >= 4, "truncated file: ", path);
    std::int32_t d = 0;
    is.read(reinterpret_cast<char*>(&d), 4);
    require(d > 0, "invalid dimension header ", d, " in ", path);
    const std::uint64_t record = 4 + static_cast<std::uint64_t>(d) * element_size(format);
    const std::uint64_t n_full = file_size / record;
    const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(n_full, opt.max_count));
    if (n == n_full) {
        require(file_size % record == 0, "truncated file or inconsistent dimension headers: ", path);
    }
    is.seekg(0);
    std::vector<char> buf;
    constexpr std::size_t batch = 4096;
    for (std::size_t i0 = 0; i0 < n; i0 += batch) {
        const std::size_t nb = std::min(batch, n - i0);
        buf.resize(nb * record);
        is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        require(static_cast<std::size_t>(is.gcount()) == buf.size(), "truncated file: ", path);
        for (std::size_t j = 0; j < nb; ++j) {
            const char* rec = buf.data() + j * record;
            std::int32_t dj = 0;
            std::memcpy(&dj, rec, 4);
            require(dj == d, "inconsistent dimension header at record ", i0 + j, ": ", dj,
                    " != ", d, " in ", path);
            sink(i0 + j, rec + 4);
        }
    }
    return {static_cast<std::size_t>(d), n};
}

} // namespace detail

/// Load a vector file. bvecs components are widened to float unchanged; ivecs
/// components are converted to float.
inline VectorSet read_vectors(const std::string& path, VecFormat format, const ReadOptions& opt = {}) {
    std::vector<float> data;
    std::size_t dim = 0;
    auto sink = [&](std::size_t i, const char* payload) {
        if (data.size() < (i + 1) * dim) {
            data.resize((i + 1) * dim);
        }
        float* out = data.data() + i * dim;
        switch (format) {
        case VecFormat::fvecs:
            std::memcpy(out, payload, dim * 4);
            break;
        case VecFormat::bvecs:
            for (std::size_t k = 0; k < dim; ++k) {
                out[k] = static_cast<float>(static_cast<std::uint8_t>(payload[k]));
            }
            break;
        case VecFormat::ivecs:
            for (std::size_t k = 0; k < dim; ++k) {
                std::int32_t v = 0;
                std::memcpy(&v, payload + 4 * k, 4);
                out[k] = static_cast<float>(v);
            }
            break;
        }
    };
    // The dimension is only known after the first header; peek it first.
    {
        std::ifstream is(path, std::ios::binary);
        detail::require(static_cast<bool>(is), "cannot open: ", path);
        std::int32_t d = 0;
        if (is.read(reinterpret_cast<char*>(&d), 4)) {
            dim = d > 0 ? static_cast<std::size_t>(d) : 0;
        }
    }
    auto [d, n] = detail::read_records(path, format, opt, sink);
    data.resize(n * d);
    VectorSet out(d, std::move(data));
    detail::require(out.all_finite(), "non-finite component in ", path);
    return out;
}

inline VectorSet read_vectors(const std::string& path, const ReadOptions& opt = {}) {
    return read_vectors(path, format_from_path(path), opt);
}

inline void write_vectors(const std::string& path, const VectorSet& set, VecFormat format) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    detail::require(static_cast<bool>(os), "cannot open for writing: ", path);
    const auto d = static_cast<std::int32_t>(set.dim());
    std::vector<char> rec(4 + set.dim() * element_size(format));
    for (std::size_t i = 0; i < set.size(); ++i) {
        std::memcpy(rec.data(), &d, 4);
        const auto v = set[i];
        switch (format) {
        case VecFormat::fvecs:
            std::memcpy(rec.data() + 4, v.data(), v.size() * 4);
            break;
        case VecFormat::bvecs:
            for (std::size_t k = 0; k < v.size(); ++k) {
                detail::require(v[k] >= 0.f && v[k] <= 255.f && v[k] == std::floor(v[k]),
                                "bvecs component out of byte range: ", v[k]);
                rec[4 + k] = static_cast<char>(static_cast<std::uint8_t>(v[k]));
            }
            break;
        case VecFormat::ivecs:
            for (std::size_t k = 0; k < v.size(); ++k) {
                detail::require(v[k] == std::floor(v[k]) && std::abs(v[k]) < 2147483520.f,
                                "ivecs component is not a 32-bit integer: ", v[k]);
                const auto iv = static_cast<std::int32_t>(v[k]);
                std::memcpy(rec.data() + 4 + 4 * k, &iv, 4);
            }
            break;
        }
        os.write(rec.data(), static_cast<std::streamsize>(rec.size()));
    }
    detail::require(static_cast<bool>(os), "write failed: ", path);
}

inline void write_vectors(const std::string& path, const VectorSet& set) {
    write_vectors(path, set, format_from_path(path));
}

inline GroundTruth read_ground_truth(const std::string& path, std::size_t max_queries = std::numeric_limits<std::size_t>::max()) {
    GroundTruth gt;
    ReadOptions opt;
    opt.max_count = max_queries;
    auto [d, n] = detail::read_records(path, VecFormat::ivecs, opt, [&](std::size_t i, const char* payload) {
        if (gt.depth == 0) {
            std::int32_t d0 = 0;
            std::memcpy(&d0, payload - 4, 4);
            gt.depth = static_cast<std::size_t>(d0);
        }
        gt.ids.resize((i + 1) * gt.depth);
        for (std::size_t k = 0; k < gt.depth; ++k) {
            std::int32_t v = 0;
            std::memcpy(&v, payload + 4 * k, 4);
            detail::require(v >= 0, "negative id in ground truth file ", path);
            gt.ids[i * gt.depth + k] = static_cast<idx_t>(v);
        }
    });
    gt.depth = d;
    gt.query_count = n;
    return gt;
}

inline void write_ground_truth(const std::string& path, const GroundTruth& gt) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    detail::require(static_cast<bool>(os), "cannot open for writing: ", path);
    const auto d = static_cast<std::int32_t>(gt.depth);
    for (std::size_t q = 0; q < gt.query_count; ++q) {
        os.write(reinterpret_cast<const char*>(&d), 4);
        for (idx_t id : gt.row(q)) {
            const auto v = static_cast<std::int32_t>(id);
            os.write(reinterpret_cast<const char*>(&v), 4);
        }
    }
    detail::require(static_cast<bool>(os), "write failed: ", path);
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Gaussian mixture: centers ~ N(0, I), point i ~ center[i % clusters] + N(0, 0.1 I).
inline VectorSet synth_dataset(std::size_t n, std::size_t d, std::size_t clusters, std::uint64_t seed) {
    detail::require(n > 0 && d > 0 && clusters > 0, "synth_dataset: n, d and clusters must be positive");
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> gauss(0.f, 1.f);
    std::vector<float> centers(clusters * d);
    for (auto& c : centers) {
        c = gauss(rng);
    }
    const float sigma = std::sqrt(0.1f);
    VectorSet out(d, n);
    for (std::size_t i = 0; i < n; ++i) {
        const float* c = centers.data() + (i % clusters) * d;
        auto row = out.row(i);
        for (std::size_t k = 0; k < d; ++k) {
            row[k] = c[k] + sigma * gauss(rng);
        }
    }
    return out;
}

/// Mixture of local linear patches: each component has its own center and a
/// random `latent_dim`-dimensional basis; samples are center + basis * z +
/// isotropic noise. Unlike the isotropic mixture, neighbors carry information
/// about a point, which is the regime descriptor data lives in.
class LocalSubspaceModel {
public:
    LocalSubspaceModel(std::size_t d, std::size_t clusters, std::size_t latent_dim, float noise,
                       std::uint64_t seed, float spread = 1.f)
        : d_(d), clusters_(clusters), latent_(latent_dim), noise_(noise) {
        detail::require(d > 0 && clusters > 0 && latent_dim > 0,
                        "LocalSubspaceModel: d, clusters and latent_dim must be positive");
        std::mt19937_64 rng(seed);
        std::normal_distribution<float> gauss(0.f, 1.f);
        centers_.resize(clusters * d);
        for (auto& c : centers_) {
            c = spread * gauss(rng);
        }
        bases_.resize(clusters * d * latent_dim);
        const float scale = 1.f / std::sqrt(static_cast<float>(latent_dim));
        for (auto& b : bases_) {
            b = scale * gauss(rng);
        }
    }

    std::size_t dim() const { return d_; }

    VectorSet sample(std::size_t n, std::uint64_t seed) const {
        std::mt19937_64 rng(seed);
        std::normal_distribution<float> gauss(0.f, 1.f);
        std::uniform_int_distribution<std::size_t> pick(0, clusters_ - 1);
        VectorSet out(d_, n);
        std::vector<float> z(latent_);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = pick(rng);
            for (auto& v : z) {
                v = gauss(rng);
            }
            const float* center = centers_.data() + c * d_;
            const float* basis = bases_.data() + c * d_ * latent_;
            auto row = out.row(i);
            for (std::size_t k = 0; k < d_; ++k) {
                row[k] = center[k] + inner_product(basis + k * latent_, z.data(), latent_) +
                         noise_ * gauss(rng);
            }
        }
        return out;
    }

private:
    std::size_t d_, clusters_, latent_;
    float noise_;
    std::vector<float> centers_;
    std::vector<float> bases_;
};

// ---------------------------------------------------------------------------
// Exact search and metrics

namespace detail {

// Bounded max-heap keeping the k smallest Neighbors.
class TopK {
public:
    explicit TopK(std::size_t k) : k_(k) { heap_.reserve(k + 1); }

    void push(float distance, idx_t id) {
        const Neighbor n{distance, id};
        if (heap_.size() < k_) {
            heap_.push_back(n);
            std::push_heap(heap_.begin(), heap_.end());
        } else if (k_ > 0 && n < heap_.front()) {
            std::pop_heap(heap_.begin(), heap_.end());
            heap_.back() = n;
            std::push_heap(heap_.begin(), heap_.end());
        }
    }

    float worst() const {
        return heap_.size() < k_ ? std::numeric_limits<float>::infinity() : heap_.front().distance;
    }

    std::vector<Neighbor> sorted() && {
        std::sort_heap(heap_.begin(), heap_.end());
        return std::move(heap_);
    }

private:
    std::size_t k_;
    std::vector<Neighbor> heap_;
};

} // namespace detail

struct KnnOptions {
    /// Skip base id == query index (all-pairs neighbor graphs of a set with itself).
    bool exclude_self = false;
};

inline GroundTruth brute_force_knn(const VectorSet& base, const VectorSet& queries, std::size_t k,
                                   const KnnOptions& opt = {}) {
    detail::require(base.dim() == queries.dim(), "brute_force_knn: dimension mismatch (", base.dim(),
                    " vs ", queries.dim(), ")");
    const std::size_t available = base.size() - (opt.exclude_self ? 1 : 0);
    detail::require(k <= available, "brute_force_knn: k=", k, " exceeds base size ", available);
    GroundTruth gt;
    gt.query_count = queries.size();
    gt.depth = k;
    gt.ids.assign(queries.size() * k, kNoId);
    gt.distances.assign(queries.size() * k, 0.f);
    const std::size_t d = base.dim();
    parallel_for(queries.size(), [&](std::size_t q) {
        detail::TopK top(k);
        const float* qv = queries.ptr(q);
        for (std::size_t i = 0; i < base.size(); ++i) {
            if (opt.exclude_self && i == q) {
                continue;
            }
            const float dist = l2sqr(qv, base.ptr(i), d);
            if (dist <= top.worst()) {
                top.push(dist, static_cast<idx_t>(i));
            }
        }
        auto res = std::move(top).sorted();
        for (std::size_t r = 0; r < k; ++r) {
            gt.ids[q * k + r] = res[r].id;
            gt.distances[q * k + r] = res[r].distance;
        }
    });
    return gt;
}

/// recall@r = fraction of queries whose ground-truth nearest neighbor appears
/// among the first r returned ids.
inline EvalMetrics recall_at(const std::vector<std::vector<idx_t>>& results, const GroundTruth& gt,
                             std::span<const std::size_t> ranks) {
    detail::require(results.size() == gt.query_count, "recall_at: ", results.size(),
                    " result lists for ", gt.query_count, " ground-truth queries");
    detail::require(gt.depth >= 1 || gt.query_count == 0, "recall_at: empty ground truth");
    EvalMetrics m;
    std::vector<std::size_t> sorted_ranks(ranks.begin(), ranks.end());
    std::sort(sorted_ranks.begin(), sorted_ranks.end());
    // position of the true nearest neighbor in each result list (npos if absent)
    std::vector<std::size_t> pos(results.size(), std::numeric_limits<std::size_t>::max());
    std::size_t shortest = std::numeric_limits<std::size_t>::max();
    for (std::size_t q = 0; q < results.size(); ++q) {
        const idx_t target = gt.row(q)[0];
        const auto& r = results[q];
        shortest = std::min(shortest, r.size());
        auto it = std::find(r.begin(), r.end(), target);
        if (it != r.end()) {
            pos[q] = static_cast<std::size_t>(it - r.begin());
        }
    }
    for (std::size_t rank : sorted_ranks) {
        detail::require(rank >= 1, "recall_at: ranks start at 1");
        std::size_t hits = 0;
        for (std::size_t p : pos) {
            hits += p < rank ? 1 : 0;
        }
        m.recall_at[rank] = results.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(results.size());
        if (!results.empty() && rank > shortest) {
            m.lower_bound_ranks.push_back(rank);
        }
    }
    return m;
}

inline EvalMetrics recall_at(const std::vector<std::vector<idx_t>>& results, const GroundTruth& gt,
                             std::initializer_list<std::size_t> ranks) {
    std::vector<std::size_t> r(ranks);
    return recall_at(results, gt, std::span<const std::size_t>(r));
}

} // namespace lnc
