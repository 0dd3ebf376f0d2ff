// Copyright 2026 The GTCA Authors
// SPDX-License-Identifier: Apache-2.0

#include "gtca/probe/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include "gtca/util/errors.hpp"
#include "gtca/util/hash.hpp"
#include "gtca/util/rng.hpp"
#include "json.hpp"

namespace gtca::probe {

namespace {

using nlohmann::json;

Edge ordered(std::size_t a, std::size_t b) { return a < b ? Edge{a, b} : Edge{b, a}; }

// Union-find with path halving.
struct DisjointSets {
    std::vector<std::size_t> parent;
    explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), std::size_t{0}); }
    std::size_t find(std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    bool unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        parent[std::max(a, b)] = std::min(a, b);
        return true;
    }
};

std::uint64_t sample_key(const ProbeSample& s) {
    auto bytes = [](const num::Tensor<double>& t) {
        return std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(t.data().data()),
                                             t.data().size() * sizeof(double));
    };
    return fnv1a64(bytes(s.gold), fnv1a64(bytes(s.words)));
}

}  // namespace

void validate_gold(const GoldItem& item) {
    const std::size_t n = item.words();
    if (n == 0) throw InputError("gold item has no words");
    std::size_t next = 0;
    for (const auto& s : item.word_token_spans) {
        if (s.lo != next || s.hi < s.lo) throw InputError("gold word_token_spans must tile the tokens in order");
        next = s.hi + 1;
    }
    if (next != item.tokens.size()) throw InputError("gold word_token_spans do not cover every token");
    if (item.edges.size() + 1 != n) {
        throw InputError("gold tree over " + std::to_string(n) + " words needs " + std::to_string(n - 1) + " edges, got " +
                         std::to_string(item.edges.size()));
    }
    DisjointSets ds(n);
    for (const auto& [a, b] : item.edges) {
        if (a >= n || b >= n || a == b) throw InputError("gold edge out of range");
        if (!ds.unite(a, b)) throw InputError("gold edges contain a cycle");
    }
}

std::vector<GoldItem> read_gold_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path.string());
    std::vector<GoldItem> out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const json j = json::parse(line);
            GoldItem item;
            item.tokens = j.at("tokens").get<std::vector<std::string>>();
            for (const auto& e : j.at("edges")) {
                item.edges.push_back(ordered(e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>()));
            }
            for (const auto& s : j.at("word_token_spans")) {
                item.word_token_spans.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
            }
            validate_gold(item);
            out.push_back(std::move(item));
        } catch (const json::exception& e) {
            throw InputError(path.string() + ":" + std::to_string(number) + ": " + e.what());
        } catch (const InputError& e) {
            throw InputError(path.string() + ":" + std::to_string(number) + ": " + e.what());
        }
    }
    return out;
}

void write_gold_file(const std::filesystem::path& path, const std::vector<GoldItem>& items) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    for (const auto& it : items) {
        json edges = json::array(), spans = json::array();
        for (const auto& [a, b] : it.edges) edges.push_back({a, b});
        for (const auto& s : it.word_token_spans) spans.push_back({s.lo, s.hi});
        out << json{{"tokens", it.tokens}, {"edges", edges}, {"word_token_spans", spans}}.dump() << '\n';
    }
}

num::Tensor<double> tree_distances(std::size_t n, const std::vector<Edge>& edges) {
    std::vector<std::vector<std::size_t>> adj(n);
    for (const auto& [a, b] : edges) {
        if (a >= n || b >= n) throw InputError("tree_distances: edge out of range");
        adj[a].push_back(b);
        adj[b].push_back(a);
    }
    num::Tensor<double> d = num::Tensor<double>::matrix(n, n, -1.0);
    for (std::size_t s = 0; s < n; ++s) {
        std::deque<std::size_t> queue{s};
        d(s, s) = 0.0;
        while (!queue.empty()) {
            const std::size_t u = queue.front();
            queue.pop_front();
            for (auto v : adj[u]) {
                if (d(s, v) < 0.0) {
                    d(s, v) = d(s, u) + 1.0;
                    queue.push_back(v);
                }
            }
        }
    }
    for (double v : d.data())
        if (v < 0.0) throw InputError("tree_distances: edges do not connect every word");
    return d;
}

std::vector<Edge> mst_undirected(const num::Tensor<double>& dist) {
    if (dist.shape().size() != 2 || dist.rows() != dist.cols()) throw InputError("mst_undirected: matrix must be square");
    const std::size_t n = dist.rows();
    if (n == 0) throw InputError("mst_undirected: empty matrix");
    for (std::size_t i = 0; i < n; ++i) {
        if (dist(i, i) != 0.0) throw InputError("mst_undirected: diagonal must be zero");
        for (std::size_t j = 0; j < n; ++j) {
            if (!std::isfinite(dist(i, j)) || dist(i, j) < 0.0) throw InputError("mst_undirected: bad distance");
            if (dist(i, j) != dist(j, i)) throw InputError("mst_undirected: matrix is not symmetric");
        }
    }
    std::vector<Edge> candidates;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) candidates.push_back({i, j});
    std::stable_sort(candidates.begin(), candidates.end(), [&](const Edge& a, const Edge& b) {
        return dist(a.first, a.second) < dist(b.first, b.second);
    });
    DisjointSets ds(n);
    std::vector<Edge> out;
    for (const auto& e : candidates) {
        if (ds.unite(e.first, e.second)) out.push_back(e);
        if (out.size() + 1 == n) break;
    }
    return out;
}

double uuas(const std::vector<Edge>& predicted, const std::vector<Edge>& gold) {
    if (predicted.size() != gold.size()) throw InputError("uuas: edge counts differ");
    if (gold.empty()) throw InputError("uuas: need at least two words");
    std::set<Edge> g;
    for (const auto& [a, b] : gold) g.insert(ordered(a, b));
    if (g.size() != gold.size()) throw InputError("uuas: repeated gold edge");
    std::size_t hits = 0;
    std::set<Edge> seen;
    for (const auto& [a, b] : predicted) {
        const Edge e = ordered(a, b);
        if (!seen.insert(e).second) throw InputError("uuas: repeated predicted edge");
        hits += g.count(e);
    }
    return static_cast<double>(hits) / static_cast<double>(gold.size());
}

num::Tensor<double> probe_distances(const num::Tensor<double>& b, const num::Tensor<double>& words) {
    const std::size_t k = b.rows(), d = b.cols(), n = words.rows();
    if (words.cols() != d) throw num::ShapeError("probe_distances: word width does not match the probe");
    num::Tensor<double> proj = num::Tensor<double>::matrix(n, k);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < k; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += b(r, c) * words(i, c);
            proj(i, r) = s;
        }
    num::Tensor<double> out = num::Tensor<double>::matrix(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (std::size_t r = 0; r < k; ++r) {
                const double u = proj(i, r) - proj(j, r);
                s += u * u;
            }
            out(i, j) = out(j, i) = s;
        }
    return out;
}

double probe_loss(const num::Tensor<double>& b, std::span<const ProbeSample> samples) {
    if (samples.empty()) throw InputError("probe_loss: no samples");
    double total = 0.0;
    for (const auto& s : samples) {
        const auto pred = probe_distances(b, s.words);
        const std::size_t n = s.words.rows();
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) sum += std::abs(pred(i, j) - s.gold(i, j));
        total += sum / static_cast<double>(n * (n - 1) / 2);
    }
    return total / static_cast<double>(samples.size());
}

ProbeParams train_probe(std::span<const ProbeSample> samples, const ProbeConfig& config) {
    if (samples.empty()) throw InputError("train_probe: no samples");
    const std::size_t d = samples[0].words.cols();
    for (const auto& s : samples) {
        if (s.words.cols() != d) throw InputError("train_probe: samples differ in width");
        if (s.words.rows() < 2) throw InputError("train_probe: every sentence needs at least two words");
        if (s.gold.rows() != s.words.rows() || s.gold.cols() != s.words.rows()) {
            throw InputError("train_probe: gold distances do not match the word count");
        }
    }
    const std::size_t k = config.rank == 0 ? std::min<std::size_t>(d, 32) : config.rank;
    if (k > d) throw InputError("probe rank " + std::to_string(k) + " exceeds hidden width " + std::to_string(d));

    // Canonical order so the summed gradient is independent of input order.
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<std::uint64_t> keys;
    for (const auto& s : samples) keys.push_back(sample_key(s));
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
    std::vector<ProbeSample> sorted;
    for (auto i : order) sorted.push_back(samples[i]);

    ProbeParams out;
    out.b = num::Tensor<double>::matrix(k, d);
    for (std::size_t r = 0; r < k; ++r) out.b(r, r) = 1.0;

    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<double> m1(k * d, 0.0), m2(k * d, 0.0);
    std::uint64_t t = 0;
    double lr = config.lr;
    const std::size_t every = std::max<std::size_t>(1, config.checkpoint_every);
    num::Tensor<double> saved = out.b;
    out.checkpoint_losses.push_back(probe_loss(out.b, sorted));

    num::Tensor<double> grad = num::Tensor<double>::matrix(k, d);
    std::vector<double> v(d), u(k);
    for (std::size_t step = 0; step < config.steps; ++step) {
        std::fill(grad.data().begin(), grad.data().end(), 0.0);
        for (const auto& s : sorted) {
            const std::size_t n = s.words.rows();
            const double w = 1.0 / (static_cast<double>(n * (n - 1) / 2) * static_cast<double>(sorted.size()));
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = i + 1; j < n; ++j) {
                    for (std::size_t c = 0; c < d; ++c) v[c] = s.words(i, c) - s.words(j, c);
                    double dist = 0.0;
                    for (std::size_t r = 0; r < k; ++r) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < d; ++c) acc += out.b(r, c) * v[c];
                        u[r] = acc;
                        dist += acc * acc;
                    }
                    const double resid = dist - s.gold(i, j);
                    const double sign = resid > 0.0 ? 1.0 : (resid < 0.0 ? -1.0 : 0.0);
                    if (sign == 0.0) continue;
                    for (std::size_t r = 0; r < k; ++r)
                        for (std::size_t c = 0; c < d; ++c) grad(r, c) += sign * w * 2.0 * u[r] * v[c];
                }
        }
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t idx = 0; idx < k * d; ++idx) {
            const double g = grad.data()[idx];
            m1[idx] = beta1 * m1[idx] + (1.0 - beta1) * g;
            m2[idx] = beta2 * m2[idx] + (1.0 - beta2) * g * g;
            out.b.data()[idx] -= lr * (m1[idx] / c1) / (std::sqrt(m2[idx] / c2) + eps);
        }
        if ((step + 1) % every == 0 || step + 1 == config.steps) {
            const double loss = probe_loss(out.b, sorted);
            if (!std::isfinite(loss)) throw num::NumericError("probe loss is not finite at step " + std::to_string(step));
            if (loss > out.checkpoint_losses.back()) {
                out.b = saved;
                std::fill(m1.begin(), m1.end(), 0.0);
                std::fill(m2.begin(), m2.end(), 0.0);
                t = 0;
                lr *= 0.5;
                out.checkpoint_losses.push_back(out.checkpoint_losses.back());
            } else {
                saved = out.b;
                out.checkpoint_losses.push_back(loss);
            }
        }
    }
    return out;
}

double random_baseline_uuas(const std::vector<GoldItem>& items, std::size_t samples_per_item, std::uint64_t seed) {
    if (items.empty() || samples_per_item == 0) throw InputError("random baseline needs items and samples");
    Rng rng(derive_seed(seed, "probe.random_baseline"));
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& item : items) {
        const std::size_t n = item.words();
        if (n < 2) continue;
        for (std::size_t s = 0; s < samples_per_item; ++s) {
            // Uniform labeled tree from a random Prüfer sequence.
            std::vector<std::size_t> pruefer(n >= 2 ? n - 2 : 0);
            for (auto& x : pruefer) x = rng.uniform_index(n);
            std::vector<std::size_t> degree(n, 1);
            for (auto x : pruefer) ++degree[x];
            std::vector<Edge> edges;
            for (auto x : pruefer) {
                for (std::size_t leaf = 0; leaf < n; ++leaf) {
                    if (degree[leaf] == 1) {
                        edges.push_back(ordered(leaf, x));
                        --degree[leaf];
                        --degree[x];
                        break;
                    }
                }
            }
            std::vector<std::size_t> rest;
            for (std::size_t v = 0; v < n; ++v)
                if (degree[v] == 1) rest.push_back(v);
            edges.push_back(ordered(rest.at(0), rest.at(1)));
            total += uuas(edges, item.edges);
            ++count;
        }
    }
    if (count == 0) throw InputError("random baseline: no item has two words");
    return total / static_cast<double>(count);
}

template <typename T>
std::vector<std::vector<ProbeSample>> layer_samples(const model::Transformer<T>& m, const model::Tokenizer& tok,
                                                    const std::vector<GoldItem>& items,
                                                    const ProbeLayersOptions& options) {
    if (!options.structures.empty() && options.structures.size() != items.size()) {
        throw InputError("probe: one structure per item expected");
    }
    const std::size_t layers = m.config().layers, d = m.config().d_model;
    std::vector<std::vector<ProbeSample>> out(layers, std::vector<ProbeSample>(items.size()));
    for (std::size_t it = 0; it < items.size(); ++it) {
        const auto& item = items[it];
        validate_gold(item);
        std::vector<std::int32_t> ids;
        for (const auto& t : item.tokens) {
            const auto id = tok.id(t);
            if (id < 0) throw InputError("probe: token '" + t + "' is not in the vocabulary");
            ids.push_back(id);
        }
        num::Graph<T> g;
        std::optional<model::StructureInput> in;
        if (!options.structures.empty()) {
            const auto& st = options.structures[it];
            in = model::StructureInput{st.fields, st.mask, options.update};
        }
        const auto res = m.forward(g, ids, in ? &*in : nullptr);
        const auto gold = tree_distances(item.words(), item.edges);
        for (std::size_t l = 0; l < layers; ++l) {
            const auto& h = res.hidden[l].value();
            ProbeSample s{num::Tensor<double>::matrix(item.words(), d), gold};
            for (std::size_t w = 0; w < item.words(); ++w) {
                const auto span = item.word_token_spans[w];
                for (std::size_t t = span.lo; t <= span.hi; ++t)
                    for (std::size_t c = 0; c < d; ++c) s.words(w, c) += static_cast<double>(h(t, c));
                for (std::size_t c = 0; c < d; ++c) s.words(w, c) /= static_cast<double>(span.length());
            }
            out[l][it] = std::move(s);
        }
    }
    return out;
}

template <typename T>
std::vector<LayerUuas> probe_layers(const model::Transformer<T>& m, const model::Tokenizer& tok,
                                    const std::vector<GoldItem>& items, const ProbeLayersOptions& options) {
    std::vector<GoldItem> usable;
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].words() >= 2) keep.push_back(i);
    }
    if (keep.empty()) throw InputError("probe: no sentence has two words");
    ProbeLayersOptions opts = options;
    opts.structures.clear();
    for (auto i : keep) {
        usable.push_back(items[i]);
        if (!options.structures.empty()) opts.structures.push_back(options.structures.at(i));
    }
    const auto samples = layer_samples(m, tok, usable, opts);

    // Seeded train / held-out split.
    std::vector<std::size_t> train_idx, test_idx;
    if (usable.size() < 5) {
        train_idx.resize(usable.size());
        std::iota(train_idx.begin(), train_idx.end(), std::size_t{0});
        test_idx = train_idx;
    } else {
        std::vector<std::size_t> perm(usable.size());
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        Rng rng(derive_seed(options.probe.seed, "probe.split"));
        rng.shuffle(perm);
        const auto held = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::round(options.heldout_fraction * static_cast<double>(usable.size()))));
        test_idx.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(held));
        train_idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(held), perm.end());
        std::sort(test_idx.begin(), test_idx.end());
        std::sort(train_idx.begin(), train_idx.end());
    }

    std::vector<LayerUuas> rows(samples.size());
    auto run_layer = [&](std::size_t l) {
        // Residual states are far smaller than tree distances at init, so
        // words are centered and scaled to unit RMS with training-split stats.
        const std::size_t d = samples[l].front().words.cols();
        std::vector<double> mean(d, 0.0);
        std::size_t count = 0;
        for (auto i : train_idx) {
            const auto& w = samples[l][i].words;
            for (std::size_t r = 0; r < w.rows(); ++r)
                for (std::size_t c = 0; c < d; ++c) mean[c] += w(r, c);
            count += w.rows();
        }
        for (auto& v : mean) v /= static_cast<double>(count);
        double sq = 0.0;
        for (auto i : train_idx) {
            const auto& w = samples[l][i].words;
            for (std::size_t r = 0; r < w.rows(); ++r)
                for (std::size_t c = 0; c < d; ++c) sq += (w(r, c) - mean[c]) * (w(r, c) - mean[c]);
        }
        const double rms = std::sqrt(sq / static_cast<double>(count * d));
        const double inv = rms > 0.0 ? 1.0 / rms : 1.0;
        auto normalized = [&](std::size_t i) {
            ProbeSample s = samples[l][i];
            for (std::size_t r = 0; r < s.words.rows(); ++r)
                for (std::size_t c = 0; c < d; ++c) s.words(r, c) = (s.words(r, c) - mean[c]) * inv;
            return s;
        };
        std::vector<ProbeSample> train;
        for (auto i : train_idx) train.push_back(normalized(i));
        const auto params = train_probe(train, options.probe);
        double total = 0.0;
        for (auto i : test_idx) {
            const auto pred = mst_undirected(probe_distances(params.b, normalized(i).words));
            total += uuas(pred, usable[i].edges);
        }
        rows[l] = {l, total / static_cast<double>(test_idx.size()), test_idx.size()};
    };
    const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, samples.size()));
    if (threads == 1) {
        for (std::size_t l = 0; l < samples.size(); ++l) run_layer(l);
    } else {
        std::vector<std::thread> pool;
        std::exception_ptr error;
        std::mutex mu;
        for (std::size_t w = 0; w < threads; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t l = w; l < samples.size(); l += threads) {
                    try {
                        run_layer(l);
                    } catch (...) {
                        std::lock_guard lock(mu);
                        if (!error) error = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
        if (error) std::rethrow_exception(error);
    }
    return rows;
}

std::vector<GoldItem> subsample(const std::vector<GoldItem>& items, std::size_t n, std::uint64_t seed) {
    if (n >= items.size()) return items;
    std::vector<std::size_t> idx(items.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "probe.subsample"));
    rng.shuffle(idx);
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    std::vector<GoldItem> out;
    for (auto i : idx) out.push_back(items[i]);
    return out;
}

void write_uuas_csv(const std::filesystem::path& path, const std::vector<LayerUuas>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    out << "layer,uuas,n_sentences\n";
    char buf[40];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.17g", r.uuas);
        out << r.layer << ',' << buf << ',' << r.sentences << '\n';
    }
}

#define GTCA_INSTANTIATE_PROBE(T)                                                                                  \
    template std::vector<std::vector<ProbeSample>> layer_samples<T>(                                               \
        const model::Transformer<T>&, const model::Tokenizer&, const std::vector<GoldItem>&,                       \
        const ProbeLayersOptions&);                                                                                \
    template std::vector<LayerUuas> probe_layers<T>(const model::Transformer<T>&, const model::Tokenizer&,         \
                                                    const std::vector<GoldItem>&, const ProbeLayersOptions&);

GTCA_INSTANTIATE_PROBE(float)
GTCA_INSTANTIATE_PROBE(double)

#undef GTCA_INSTANTIATE_PROBE

}  // namespace gtca::probe
