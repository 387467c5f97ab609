#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "lnc/codec.hpp"
#include "lnc/common.hpp"
#include "lnc/dataset.hpp"
#include "lnc/graph.hpp"
#include "lnc/io.hpp"
#include "lnc/refine.hpp"

namespace lnc {

/// Index configuration in the "L<links>&<code>[ M=<bytes>]" notation, e.g.
/// "L6&OPQ40 M=0" or "L6&OPQ32,M=8". Without an M term there is no
/// refinement; M=0 is the shared-weight (0-byte) refinement.
struct LCConfig {
    std::size_t links = 6;
    CodecSpec code = CodecSpec::parse("OPQ40");
    std::optional<std::size_t> M;
    std::size_t refine_shortlist = 10;
    std::size_t B = 256;
    std::size_t ef_construction = 200;
    std::size_t k_upper = 32;
    double level_ratio = 30.0;
    std::size_t regression_sample = 250000;
    std::size_t regression_iters = 10;
    std::uint64_t seed = 1234;
    CodecTrainOptions codec_options{};

    static LCConfig parse(std::string_view text) {
        LCConfig cfg;
        auto bad = [&](const char* why) { detail::fail("bad index config '", text, "': ", why); };
        if (!text.starts_with("L")) {
            bad("expected L<links>&<code>");
        }
        const auto amp = text.find('&');
        if (amp == std::string_view::npos) {
            bad("missing '&'");
        }
        cfg.links = detail::parse_uint(text.substr(1, amp - 1), text);
        std::string_view rest = text.substr(amp + 1);
        const auto sep = rest.find_first_of(", ");
        std::string_view code = rest.substr(0, sep);
        cfg.code = CodecSpec::parse(code);
        if (sep != std::string_view::npos) {
            std::string_view m = rest.substr(sep + 1);
            while (!m.empty() && (m.front() == ' ' || m.front() == ',')) {
                m.remove_prefix(1);
            }
            if (!m.starts_with("M=")) {
                bad("expected M=<bytes>");
            }
            cfg.M = detail::parse_uint(m.substr(2), text);
        }
        cfg.validate();
        return cfg;
    }

    std::string str() const {
        std::string s = "L" + std::to_string(links) + "&" + short_code();
        if (M) {
            s += " M=" + std::to_string(*M);
        }
        return s;
    }

    std::string short_code() const {
        std::string s = code.str();
        if (code.kind == CodecSpec::Kind::quantized && code.fine.bits == 8 && s.ends_with("x8")) {
            s.resize(s.size() - 2);
        }
        return s;
    }

    std::size_t code_bytes(std::size_t dim) const { return code.code_size(dim); }
    std::size_t bytes_per_vector(std::size_t dim) const { return code_bytes(dim) + 4 * links + M.value_or(0); }

    void validate() const {
        detail::require(links >= 2, "index config: at least 2 links are required, got ", links);
        detail::require(!M || *M <= 255, "index config: M must be at most 255");
        detail::require(B >= 1 && B <= 256, "index config: B must be in [1,256]");
    }
};

struct IndexStats {
    std::size_t count = 0;
    std::size_t code_bytes = 0;
    std::size_t link_bytes = 0;
    std::size_t regression_bytes = 0;
    std::size_t bytes_per_vector = 0;
    std::vector<std::size_t> level_sizes;
};

struct IndexSearchParams {
    std::size_t T = 16384;
    std::size_t k = 10;
    /// Beam width; 0 picks max(T, k) when T is finite, else 64.
    std::size_t ef = 0;
    /// Overrides the configured shortlist when set.
    std::optional<std::size_t> refine_shortlist;
};

enum class Reconstruction { plain, shared, codebook };

/// Graph over coded vectors with neighbor-based refinement. Originals are
/// discarded after build: search sees only codes, links and regression codes.
class LCIndex {
public:
    LCIndex() = default;

    const LCConfig& config() const { return cfg_; }
    const Codec& codec() const { return codec_; }
    const LayeredGraph& graph() const { return graph_; }
    const SharedBeta& shared_beta() const { return shared_; }
    const RegressionCodebook* regression() const { return has_book_ ? &book_ : nullptr; }
    std::size_t size() const { return count_; }
    std::size_t dim() const { return codec_.dim(); }
    const std::uint8_t* code(idx_t i) const { return codes_.data() + static_cast<std::size_t>(i) * codec_.code_size(); }
    const std::uint8_t* beta_code(idx_t i) const { return beta_codes_.data() + static_cast<std::size_t>(i) * book_.M(); }
    /// L'(B) history of the regression training, empty without a codebook.
    const std::vector<double>& regression_loss() const { return regression_loss_; }

    /// Train the codec on `learn`, encode and link `base`, then fit the
    /// refinement. `learn` should be disjoint from `base`.
    static LCIndex build(const VectorSet& learn, const VectorSet& base, const LCConfig& cfg) {
        cfg.validate();
        detail::require(!base.empty(), "index build: empty base set");
        detail::require(learn.dim() == base.dim(), "index build: learn and base dimensions differ");
        if (cfg.M && *cfg.M > 0) {
            detail::require(base.dim() % *cfg.M == 0, "index build: dim ", base.dim(), " not divisible by M=", *cfg.M);
        }
        LCIndex idx;
        idx.cfg_ = cfg;
        idx.count_ = base.size();
        idx.codec_ = Codec::train(cfg.code, learn, cfg.codec_options);
        const Codec& codec = idx.codec_;
        const std::size_t n = base.size();
        const std::size_t d = base.dim();
        const std::size_t cs = codec.code_size();
        idx.codes_.resize(n * cs);
        codec.encode_batch(base.data().data(), n, idx.codes_.data());

        // The graph is built on decoded vectors in the codec's internal space
        // with the uncompressed vector on the query side, which reproduces the
        // asymmetric distances exactly.
        const std::size_t id = codec.internal_dim();
        std::vector<float> recon(n * id);
        parallel_for(n, [&](std::size_t i) { codec.decode_internal(idx.code(static_cast<idx_t>(i)), recon.data() + i * id); });
        GraphConfig gc;
        gc.k_base = cfg.links;
        gc.k_upper = cfg.k_upper;
        gc.ef_construction = cfg.ef_construction;
        gc.level_ratio = cfg.level_ratio;
        gc.seed = derive_seed(cfg.seed, 11);
        idx.graph_ = LayeredGraph(gc);
        {
            FlatStorage storage(recon.data(), n, id);
            std::vector<idx_t> ids(n);
            std::iota(ids.begin(), ids.end(), idx_t{0});
            std::vector<float> xi(id);
            idx.graph_.add_batch(storage, ids, [&](idx_t i) {
                codec.to_internal(base.ptr(i), xi.data());
                return xi.data();
            });
        }

        // Reconstructions in the input space for the refinement stage.
        std::vector<float> orig(n * d);
        parallel_for(n, [&](std::size_t i) { codec.from_internal(recon.data() + i * id, orig.data() + i * d); });
        std::vector<float>().swap(recon);
        idx.fit_refinement(base, orig);
        return idx;
    }

    /// Refit shared weights and (when M > 0) the regression codebook with new
    /// settings. `base` must be the set the index was built from.
    void refit_refinement(const VectorSet& base, std::optional<std::size_t> M, std::size_t B, std::size_t iters,
                          std::size_t sample) {
        detail::require(base.size() == count_ && base.dim() == dim(), "refit: base does not match the index");
        LCConfig cfg = cfg_;
        cfg.M = M;
        cfg.B = B;
        cfg.regression_iters = iters;
        cfg.regression_sample = sample;
        cfg.validate();
        if (M && *M > 0) {
            detail::require(dim() % *M == 0, "refit: dim ", dim(), " not divisible by M=", *M);
        }
        cfg_ = cfg;
        has_book_ = false;
        book_ = RegressionCodebook();
        beta_codes_.clear();
        regression_loss_.clear();
        std::vector<float> orig(count_ * dim());
        codec_.decode_batch(codes_.data(), count_, orig.data());
        fit_refinement(base, orig);
    }

    /// G(x) for indexed node i in the input space, (k+1) x dim.
    void design(idx_t i, float* G) const {
        const std::size_t d = dim();
        const std::size_t k = cfg_.links;
        std::vector<float> cache;
        std::vector<idx_t> links(graph_.links(i, 0).begin(), graph_.links(i, 0).end());
        cache.resize((links.size() + 1) * d);
        codec_.decode(code(i), cache.data());
        for (std::size_t t = 0; t < links.size(); ++t) {
            codec_.decode(code(links[t]), cache.data() + (t + 1) * d);
        }
        auto recon_of = [&](idx_t j) -> const float* {
            if (j == i) {
                return cache.data();
            }
            const auto pos = static_cast<std::size_t>(std::find(links.begin(), links.end(), j) - links.begin());
            return cache.data() + (pos + 1) * d;
        };
        std::vector<idx_t> rows(k + 1);
        design_ids(graph_, i, k, recon_of, d, rows.data());
        for (std::size_t r = 0; r <= k; ++r) {
            std::copy_n(recon_of(rows[r]), d, G + r * d);
        }
    }

    /// Estimate of indexed vector i in the input space.
    void reconstruct(idx_t i, float* out, Reconstruction mode) const {
        const std::size_t d = dim();
        if (mode == Reconstruction::plain) {
            codec_.decode(code(i), out);
            return;
        }
        std::vector<float> G((cfg_.links + 1) * d);
        design(i, G.data());
        if (mode == Reconstruction::codebook) {
            detail::require(has_book_, "index has no regression codebook");
            book_.reconstruct(beta_code(i), G.data(), out);
        } else {
            combine_rows(shared_.weights.data(), G.data(), cfg_.links + 1, d, out);
        }
    }

    /// Refinement used by stage 2: the codebook when M > 0, the shared
    /// weights when M = 0, none when M is unset.
    std::optional<Reconstruction> refinement() const {
        if (!cfg_.M) {
            return std::nullopt;
        }
        return *cfg_.M > 0 ? Reconstruction::codebook : Reconstruction::shared;
    }

    std::vector<Neighbor> search(const float* q, const IndexSearchParams& p, VisitStats* stats = nullptr) const {
        detail::require(count_ > 0, "search on an empty index");
        const std::size_t shortlist = refinement() ? p.refine_shortlist.value_or(cfg_.refine_shortlist) : 0;
        const std::size_t want = std::max(p.k, shortlist);
        SearchParams sp;
        sp.T = std::max(p.T, want);
        sp.k = want;
        sp.ef = p.ef ? std::max(p.ef, want)
                     : (p.T == std::numeric_limits<std::size_t>::max() ? std::max<std::size_t>(64, want)
                                                                       : std::max(p.T, want));
        const AdcTable table = codec_.adc_table(q);
        auto cand = graph_.search([&](idx_t j) { return table.distance(code(j)); }, sp, stats);

        const std::size_t nref = std::min(shortlist, cand.size());
        if (nref > 0) {
            const std::size_t d = dim();
            std::vector<float> est(d);
            std::vector<std::pair<Neighbor, std::size_t>> refined(nref);
            for (std::size_t r = 0; r < nref; ++r) {
                reconstruct(cand[r].id, est.data(), *refinement());
                refined[r] = {{l2sqr(q, est.data(), d), cand[r].id}, r};
            }
            std::stable_sort(refined.begin(), refined.end(), [](const auto& a, const auto& b) {
                return a.first.distance < b.first.distance;
            });
            for (std::size_t r = 0; r < nref; ++r) {
                cand[r] = refined[r].first;
            }
        }
        if (cand.size() > p.k) {
            cand.resize(p.k);
        }
        return cand;
    }

    IndexStats stats() const {
        IndexStats s;
        s.count = count_;
        s.code_bytes = codec_.code_size();
        s.link_bytes = 4 * cfg_.links;
        s.regression_bytes = has_book_ ? book_.M() : 0;
        s.bytes_per_vector = s.code_bytes + s.link_bytes + s.regression_bytes;
        s.level_sizes = graph_.level_sizes();
        return s;
    }

    // LCI1 layout: magic, config string, then length-prefixed sections:
    // codec, graph, codes, shared weights, regression codebook (empty when
    // absent), regression codes.
    void save(std::ostream& os) const {
        BinaryWriter w(os);
        w.magic("LCI1");
        w.bytes(cfg_.str());
        w.i32(static_cast<std::int64_t>(cfg_.refine_shortlist));
        w.pod(cfg_.seed);
        w.i32(static_cast<std::int64_t>(count_));
        w.bytes(to_blob(codec_));
        w.bytes(to_blob(graph_));
        w.array(std::span<const std::uint8_t>(codes_));
        w.array(std::span<const float>(shared_.weights));
        w.bytes(has_book_ ? to_blob(book_) : std::string());
        w.array(std::span<const std::uint8_t>(beta_codes_));
        w.check();
    }

    void save(const std::string& path) const {
        auto os = open_output(path);
        save(os);
    }

    static LCIndex load(std::istream& is) {
        BinaryReader r(is);
        r.expect_magic("LCI1");
        LCIndex idx;
        try {
            idx.cfg_ = LCConfig::parse(r.bytes());
        } catch (const FormatError&) {
            throw;
        } catch (const Error& e) {
            throw FormatError(std::string("corrupt index config: ") + e.what());
        }
        const auto shortlist = r.i32();
        idx.cfg_.seed = r.pod<std::uint64_t>();
        const auto count = r.i32();
        if (shortlist < 0 || count < 0) {
            throw FormatError("corrupt index header");
        }
        idx.cfg_.refine_shortlist = static_cast<std::size_t>(shortlist);
        idx.count_ = static_cast<std::size_t>(count);
        {
            std::istringstream s(r.bytes(), std::ios::binary);
            idx.codec_ = Codec::load(s);
        }
        {
            std::istringstream s(r.bytes(), std::ios::binary);
            idx.graph_ = LayeredGraph::load(s);
        }
        idx.codes_ = r.array<std::uint8_t>();
        idx.shared_.weights = r.array<float>();
        const auto book = r.bytes();
        if (!book.empty()) {
            std::istringstream s(book, std::ios::binary);
            idx.book_ = RegressionCodebook::load(s);
            idx.has_book_ = true;
        }
        idx.beta_codes_ = r.array<std::uint8_t>();
        if (idx.codes_.size() != idx.count_ * idx.codec_.code_size() || idx.graph_.size() != idx.count_ ||
            idx.beta_codes_.size() != (idx.has_book_ ? idx.count_ * idx.book_.M() : 0) ||
            idx.shared_.weights.size() != idx.cfg_.links + 1 || idx.codec_.spec().str() != idx.cfg_.code.str()) {
            throw FormatError("index sections are inconsistent");
        }
        return idx;
    }

    static LCIndex load(const std::string& path) {
        auto is = open_input(path);
        return load(is);
    }

private:
    void fit_refinement(const VectorSet& base, const std::vector<float>& orig) {
        const std::size_t n = base.size();
        const std::size_t d = base.dim();
        const std::size_t k = cfg_.links;
        const std::size_t rows = k + 1;

        std::vector<idx_t> sample(n);
        std::iota(sample.begin(), sample.end(), idx_t{0});
        if (n > cfg_.regression_sample) {
            std::mt19937_64 rng(derive_seed(cfg_.seed, 21));
            for (std::size_t i = 0; i < cfg_.regression_sample; ++i) {
                std::swap(sample[i], sample[std::uniform_int_distribution<std::size_t>(i, n - 1)(rng)]);
            }
            sample.resize(cfg_.regression_sample);
            std::sort(sample.begin(), sample.end());
        }
        const std::size_t ns = sample.size();
        auto recon_of = [&](idx_t j) { return orig.data() + static_cast<std::size_t>(j) * d; };

        std::vector<idx_t> design(ns * rows);
        parallel_for(ns, [&](std::size_t s) { design_ids(graph_, sample[s], k, recon_of, d, design.data() + s * rows); });
        std::vector<float> targets(ns * d);
        for (std::size_t s = 0; s < ns; ++s) {
            std::copy_n(base.ptr(sample[s]), d, targets.data() + s * d);
        }
        RegressionSample rs{targets.data(), ns, d, k, orig.data(), design.data()};

        LeastSquaresAccumulator acc(rows);
        std::vector<float> G(rows * d);
        for (std::size_t s = 0; s < ns; ++s) {
            rs.gather(s, G.data());
            acc.add(targets.data() + s * d, G.data(), d);
        }
        shared_ = ns * d >= rows ? acc.solve() : SharedBeta::identity(k);

        if (!cfg_.M || *cfg_.M == 0) {
            return;
        }
        RegressionTrainOptions ro;
        ro.M = *cfg_.M;
        ro.B = std::min(cfg_.B, ns);
        ro.iters = cfg_.regression_iters;
        ro.seed = derive_seed(cfg_.seed, 22);
        auto trained = train_regression_codebook(rs, ro);
        book_ = std::move(trained.book);
        regression_loss_ = std::move(trained.loss);
        has_book_ = true;

        beta_codes_.resize(n * book_.M());
        parallel_for(n, [&](std::size_t i) {
            std::vector<idx_t> ids(rows);
            std::vector<float> Gi(rows * d);
            design_ids(graph_, static_cast<idx_t>(i), k, recon_of, d, ids.data());
            for (std::size_t r = 0; r < rows; ++r) {
                std::copy_n(recon_of(ids[r]), d, Gi.data() + r * d);
            }
            book_.encode(base.ptr(i), Gi.data(), beta_codes_.data() + i * book_.M());
        });
    }

    LCConfig cfg_;
    std::size_t count_ = 0;
    Codec codec_;
    LayeredGraph graph_;
    std::vector<std::uint8_t> codes_;
    SharedBeta shared_;
    RegressionCodebook book_;
    bool has_book_ = false;
    std::vector<std::uint8_t> beta_codes_;
    std::vector<double> regression_loss_;
};

} // namespace lnc
