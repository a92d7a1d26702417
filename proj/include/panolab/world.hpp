#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <queue>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "panolab/common.hpp"
#include "panolab/pano.hpp"
#include "panolab/rng.hpp"
#include "panolab/text.hpp"

namespace panolab::world {

constexpr int kStop = -1; // oracle/agent action meaning "stop here"

struct GraphNode {
    int id = 0;
    std::array<double, 3> pos = {0, 0, 0};
    std::string pano_path; // relative to the world file
    std::string scene;
};

inline double euclidean(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

/// Undirected navigation graph with Euclidean edge weights. All-pairs
/// geodesics are precomputed at construction (worlds are desk-sized), so
/// queries are read-only and thread-safe afterwards.
class WorldGraph {
public:
    WorldGraph() = default;

    WorldGraph(std::vector<GraphNode> nodes, std::vector<std::pair<int, int>> edges)
        : nodes_(std::move(nodes)), edges_(std::move(edges)) {
        const int n = static_cast<int>(nodes_.size());
        if (n < 1) throw ValueError("world graph needs at least one node");
        for (int i = 0; i < n; ++i)
            if (nodes_[static_cast<std::size_t>(i)].id != i)
                throw ValueError("world graph nodes must be densely numbered from 0");
        adjacency_.assign(static_cast<std::size_t>(n), {});
        std::set<std::pair<int, int>> seen;
        for (auto& [a, b] : edges_) {
            if (a == b) throw ValueError("world graph: self-loop");
            if (a < 0 || b < 0 || a >= n || b >= n) throw ValueError("world graph: edge endpoint out of range");
            if (a > b) std::swap(a, b);
            if (!seen.emplace(a, b).second) throw ValueError("world graph: duplicate edge");
        }
        std::sort(edges_.begin(), edges_.end());
        for (const auto& [a, b] : edges_) {
            adjacency_[static_cast<std::size_t>(a)].push_back(b);
            adjacency_[static_cast<std::size_t>(b)].push_back(a);
        }
        for (auto& nb : adjacency_) std::sort(nb.begin(), nb.end());
        compute_distances();
        for (int i = 1; i < n; ++i)
            if (!std::isfinite(dist_[0][static_cast<std::size_t>(i)]))
                throw ValueError("world graph must be connected");
    }

    int node_count() const { return static_cast<int>(nodes_.size()); }
    const GraphNode& node(int id) const {
        check_node(id);
        return nodes_[static_cast<std::size_t>(id)];
    }
    const std::vector<GraphNode>& nodes() const { return nodes_; }
    const std::vector<std::pair<int, int>>& edges() const { return edges_; }
    const std::vector<int>& neighbors(int id) const {
        check_node(id);
        return adjacency_[static_cast<std::size_t>(id)];
    }

    double edge_weight(int a, int b) const {
        check_node(a);
        check_node(b);
        return euclidean(nodes_[static_cast<std::size_t>(a)].pos, nodes_[static_cast<std::size_t>(b)].pos);
    }

    /// Shortest-path distance in meters; 0 iff a == b.
    double geodesic(int a, int b) const {
        check_node(a);
        check_node(b);
        const double d = dist_[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
        if (!std::isfinite(d)) throw ValueError("geodesic: nodes are disconnected");
        return d;
    }

    /// Next hop toward the goal (kStop when already there). Among
    /// minimum-weight continuations ties break to the smallest node id.
    int oracle_action(int current, int goal) const {
        check_node(current);
        check_node(goal);
        if (current == goal) return kStop;
        int best = kStop;
        double best_cost = std::numeric_limits<double>::infinity();
        for (int nb : adjacency_[static_cast<std::size_t>(current)]) {
            const double cost = edge_weight(current, nb) + dist_[static_cast<std::size_t>(nb)][static_cast<std::size_t>(goal)];
            if (cost < best_cost - 1e-12) {
                best_cost = cost;
                best = nb; // neighbors are sorted ascending, so first win = smallest id
            }
        }
        if (best == kStop) throw ValueError("oracle_action: goal unreachable");
        return best;
    }

    /// Follow the oracle from start to goal; bounded by the node count.
    std::vector<int> oracle_path(int start, int goal) const {
        std::vector<int> path = {start};
        int current = start;
        for (int step = 0; step <= node_count(); ++step) {
            const int action = oracle_action(current, goal);
            if (action == kStop) return path;
            path.push_back(action);
            current = action;
        }
        throw NumericError("oracle_path did not terminate");
    }

private:
    void check_node(int id) const {
        if (id < 0 || id >= node_count()) throw ValueError("node id out of range");
    }

    void compute_distances() {
        const std::size_t n = nodes_.size();
        dist_.assign(n, std::vector<double>(n, std::numeric_limits<double>::infinity()));
        for (std::size_t src = 0; src < n; ++src) {
            auto& d = dist_[src];
            d[src] = 0.0;
            using Item = std::pair<double, int>;
            std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
            pq.emplace(0.0, static_cast<int>(src));
            while (!pq.empty()) {
                auto [cost, u] = pq.top();
                pq.pop();
                if (cost > d[static_cast<std::size_t>(u)] + 1e-15) continue;
                for (int v : adjacency_[static_cast<std::size_t>(u)]) {
                    const double nd = cost + edge_weight(u, v);
                    if (nd < d[static_cast<std::size_t>(v)] - 1e-15) {
                        d[static_cast<std::size_t>(v)] = nd;
                        pq.emplace(nd, v);
                    }
                }
            }
        }
    }

    std::vector<GraphNode> nodes_;
    std::vector<std::pair<int, int>> edges_;
    std::vector<std::vector<int>> adjacency_;
    std::vector<std::vector<double>> dist_;
};

struct Episode {
    std::vector<std::string> instruction;
    std::vector<int> path; // ground truth, consecutive nodes adjacent
    int start = 0;
    int goal = 0;

    void validate(const WorldGraph& g) const {
        if (path.empty()) throw ValueError("episode path empty");
        if (path.front() != start || path.back() != goal) throw ValueError("episode endpoints inconsistent");
        if (instruction.empty()) throw ValueError("episode instruction empty");
        for (std::size_t i = 1; i < path.size(); ++i) {
            const auto& nb = g.neighbors(path[i - 1]);
            if (!std::binary_search(nb.begin(), nb.end(), path[i]))
                throw ValueError("episode path nodes not adjacent");
        }
    }
};

enum class Provenance { original, generated };

struct Observation {
    int node = 0;
    std::vector<pano::SubView> views; // exactly 36
    std::vector<Provenance> provenance;

    void validate() const {
        if (views.size() != pano::kViewsPerPanorama || provenance.size() != views.size())
            throw ValueError("observation must carry exactly 36 views with provenance");
    }
};

inline Observation make_observation(int node, const pano::Panorama& p, Provenance prov) {
    Observation obs;
    obs.node = node;
    obs.views = pano::partition(p);
    obs.provenance.assign(obs.views.size(), prov);
    return obs;
}

struct MixPolicy {
    double ratio = 0.0; // p in [0, 1]
    enum class Scope { finetune, pretrain } scope = Scope::finetune;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(ratio >= 0.0 && ratio <= 1.0)) throw ValueError("mix ratio must be in [0, 1]");
    }
};

inline int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

struct MixResult {
    std::vector<Observation> observations;
    std::vector<int> replaced; // indices into the trajectory, ascending
};

/// Replace exactly round_half_up(p*K) trajectory viewpoints with their
/// generated counterparts. Selection is the prefix of a seeded shuffle of the
/// viewpoint indices, so it is deterministic in (p, K, seed).
inline MixResult mix_environment(const std::vector<Observation>& trajectory,
                                 const std::map<int, Observation>& generated, const MixPolicy& policy) {
    policy.validate();
    const int k = static_cast<int>(trajectory.size());
    const int count = round_half_up(policy.ratio * k);
    std::vector<int> order(trajectory.size());
    for (int i = 0; i < k; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng = Rng(policy.seed).child("mix.select");
    rng.shuffle(order);

    MixResult out;
    out.observations = trajectory;
    out.replaced.assign(order.begin(), order.begin() + count);
    std::sort(out.replaced.begin(), out.replaced.end());
    for (int idx : out.replaced) {
        const int node = trajectory[static_cast<std::size_t>(idx)].node;
        auto it = generated.find(node);
        if (it == generated.end())
            throw ValueError("mix_environment: no generated observation for node " + std::to_string(node));
        out.observations[static_cast<std::size_t>(idx)] = it->second;
        out.observations[static_cast<std::size_t>(idx)].node = node;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Procedural textures and panoramas
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t pixel_hash(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    std::uint64_t x = a * 0x9e3779b97f4a7c15ull + b * 0xbf58476d1ce4e5b9ull + c * 0x94d049bb133111ebull;
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    return x;
}

/// Texture intensity in [0, 1] for a global pixel coordinate.
inline double texture_value(int texture_id, int r, int c, std::uint64_t phase) {
    const int pr = static_cast<int>(phase % 5);
    const int pc = static_cast<int>((phase >> 8) % 7);
    const int rr = r + pr, cc = c + pc;
    switch (texture_id) {
        case 0: // checker
            return ((rr / 2 + cc / 2) % 2 == 0) ? 0.85 : 0.15;
        case 1: // stripes
            return ((cc / 2) % 2 == 0) ? 0.8 : 0.2;
        case 2: // dots
            return (rr % 4 < 2 && cc % 4 < 2) ? 0.9 : 0.25;
        case 3: // gradient
            return 0.1 + 0.8 * static_cast<double>(cc % 12) / 11.0;
        case 4: { // rings
            const double d = std::hypot(static_cast<double>(rr % 16) - 8.0, static_cast<double>(cc % 16) - 8.0);
            return (static_cast<int>(d) % 4 < 2) ? 0.75 : 0.2;
        }
        case 5: // waves
            return 0.5 + 0.38 * std::sin(0.8 * cc + 0.3 * rr);
        case 6: // bricks
            return (((rr / 3) % 2 == 0 ? cc : cc + 3) / 6 % 2 == 0) ? 0.7 : 0.25;
        case 7: // speckle
            return 0.15 + 0.7 * static_cast<double>(pixel_hash(static_cast<std::uint64_t>(rr),
                                                               static_cast<std::uint64_t>(cc), phase) >>
                                                    40) /
                              static_cast<double>(1 << 24);
        default:
            throw ValueError("unknown texture id");
    }
}

} // namespace detail

inline int scene_index(const std::string& scene) {
    const auto& labels = text::scene_labels();
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == scene) return static_cast<int>(i);
    throw ValueError("unknown scene label: " + scene);
}

inline int texture_id_for_scene(const std::string& scene) {
    return scene_index(scene) % static_cast<int>(text::texture_labels().size());
}

inline const std::string& texture_for_scene(const std::string& scene) {
    return text::texture_labels()[static_cast<std::size_t>(texture_id_for_scene(scene))];
}

/// Heading sector (0..11) of the direction v -> u, 30 degrees per sector.
inline int heading_between(const WorldGraph& g, int v, int u) {
    const auto& a = g.node(v).pos;
    const auto& b = g.node(u).pos;
    double deg = std::atan2(b[1] - a[1], b[0] - a[0]) * 180.0 / 3.14159265358979323846;
    if (deg < 0) deg += 360.0;
    return static_cast<int>(std::lround(deg / 30.0)) % 12;
}

/// World-level rendering style; held-out worlds draw unseen styles.
struct WorldStyle {
    double brightness = 1.0;
    double offset = 0.0;
};

// ---------------------------------------------------------------------------
// World synthesis
// ---------------------------------------------------------------------------

struct WorldParams {
    int node_count = 12;
    int pano_width = 96;
    int pano_height = 24;
    int channels = 1;
    int episode_count = 20;
    double cell_size = 3.0; // meters between grid rooms
    double jitter = 0.6;
    int min_path_nodes = 3;
    int max_path_nodes = 8;

    void validate() const {
        if (node_count < 2) throw ValueError("world needs at least 2 nodes");
        if (pano_width % 12 != 0 || pano_height % 3 != 0) throw ValueError("panorama dims must be 12x/3x");
        if (channels < 1 || episode_count < 1) throw ValueError("bad world params");
        if (cell_size <= 0 || jitter < 0 || jitter >= cell_size / 2) throw ValueError("bad layout params");
        if (min_path_nodes < 2 || max_path_nodes < min_path_nodes) throw ValueError("bad episode length range");
    }
};

struct World {
    WorldGraph graph;
    std::vector<pano::Panorama> panoramas; // one per node
    std::vector<Episode> episodes;
    WorldStyle style;

    Observation observation(int node) const {
        return make_observation(node, panoramas.at(static_cast<std::size_t>(node)), Provenance::original);
    }
};

namespace detail {

inline bool connected_without(const std::vector<std::set<int>>& adj, int n, int skip_a, int skip_b) {
    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    std::vector<int> stack = {0};
    seen[0] = true;
    int visited = 1;
    while (!stack.empty()) {
        const int u = stack.back();
        stack.pop_back();
        for (int v : adj[static_cast<std::size_t>(u)]) {
            if ((u == skip_a && v == skip_b) || (u == skip_b && v == skip_a)) continue;
            if (!seen[static_cast<std::size_t>(v)]) {
                seen[static_cast<std::size_t>(v)] = true;
                ++visited;
                stack.push_back(v);
            }
        }
    }
    return visited == n;
}

} // namespace detail

/// Paint one node's panorama: the node's own scene texture everywhere, the
/// neighbor's texture in the heading sector that faces it, a mild elevation
/// shading, and per-pixel speckle so views are never exactly repeated.
inline pano::Panorama render_panorama(const WorldGraph& g, int node, const WorldParams& params,
                                      const WorldStyle& style, const Rng& world_rng) {
    Rng rng = world_rng.child("pano", static_cast<std::uint64_t>(node));
    const std::uint64_t phase = rng.next_u64();
    const double node_brightness = rng.uniform(0.85, 1.05);

    const int own_tex = texture_id_for_scene(g.node(node).scene);
    std::array<int, 12> sector_tex;
    sector_tex.fill(own_tex);
    std::array<double, 12> sector_blend;
    sector_blend.fill(0.0);
    for (int nb : g.neighbors(node)) {
        const int h = heading_between(g, node, nb);
        sector_tex[static_cast<std::size_t>(h)] = texture_id_for_scene(g.node(nb).scene);
        sector_blend[static_cast<std::size_t>(h)] = 0.75;
    }

    pano::Panorama p = pano::Panorama::filled(params.pano_width, params.pano_height, params.channels);
    const int vw = p.view_width(), vh = p.view_height();
    Rng noise = rng.child("noise");
    for (int r = 0; r < p.height; ++r) {
        const int band = r / vh; // 0 top .. 2 bottom
        const double band_gain = 1.08 - 0.08 * band;
        for (int c = 0; c < p.width; ++c) {
            const int sector = c / vw;
            const double own = detail::texture_value(own_tex, r, c, phase);
            const double other = detail::texture_value(sector_tex[static_cast<std::size_t>(sector)], r, c, phase);
            const double blend = sector_blend[static_cast<std::size_t>(sector)];
            double v = (1.0 - blend) * own + blend * other;
            v = v * band_gain * node_brightness * style.brightness + style.offset;
            for (int ch = 0; ch < p.channels; ++ch) {
                const double n = noise.uniform(-0.03, 0.03);
                p.at(r, c, ch) = std::clamp(v + n, 0.0, 1.0);
            }
        }
    }
    return p;
}

/// Rooms on a jittered grid, orthogonal corridors with random pruning (kept
/// connected), procedural panoramas, and oracle-consistent episodes whose
/// shortest paths span min..max nodes when the layout allows it.
inline World make_world(std::uint64_t seed, const WorldParams& params = {}) {
    params.validate();
    Rng rng = Rng(seed).child("world");

    const int n = params.node_count;
    const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));

    Rng layout = rng.child("layout");
    std::vector<GraphNode> nodes(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        GraphNode& nd = nodes[static_cast<std::size_t>(i)];
        nd.id = i;
        const int gr = i / side, gc = i % side;
        nd.pos = {gc * params.cell_size + layout.uniform(-params.jitter, params.jitter),
                  gr * params.cell_size + layout.uniform(-params.jitter, params.jitter), 0.0};
        nd.scene = text::scene_labels()[layout.below(text::scene_labels().size())];
        nd.pano_path = "panos/node_" + std::to_string(i) + ".pan";
    }

    std::vector<std::pair<int, int>> edges;
    for (int i = 0; i < n; ++i) {
        const int gr = i / side, gc = i % side;
        if (gc + 1 < side && i + 1 < n) edges.emplace_back(i, i + 1);
        if (gr + 1 < side && i + side < n) edges.emplace_back(i, i + side);
    }

    // Prune some corridors for layout variety while preserving connectivity.
    Rng prune = rng.child("prune");
    std::vector<std::set<int>> adj(static_cast<std::size_t>(n));
    for (const auto& [a, b] : edges) {
        adj[static_cast<std::size_t>(a)].insert(b);
        adj[static_cast<std::size_t>(b)].insert(a);
    }
    std::vector<std::pair<int, int>> kept;
    for (const auto& [a, b] : edges) {
        const bool droppable = adj[static_cast<std::size_t>(a)].size() > 2 &&
                               adj[static_cast<std::size_t>(b)].size() > 2 &&
                               detail::connected_without(adj, n, a, b);
        if (droppable && prune.uniform() < 0.3) {
            adj[static_cast<std::size_t>(a)].erase(b);
            adj[static_cast<std::size_t>(b)].erase(a);
        } else {
            kept.push_back({a, b});
        }
    }

    World w;
    w.graph = WorldGraph(std::move(nodes), std::move(kept));
    Rng style_rng = rng.child("style");
    w.style.brightness = style_rng.uniform(0.8, 1.2);
    w.style.offset = style_rng.uniform(-0.08, 0.08);

    w.panoramas.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) w.panoramas.push_back(render_panorama(w.graph, i, params, w.style, rng));

    // Episodes: start uniform, goal uniform among nodes whose oracle path
    // length (in nodes) lies in the requested band, relaxed when the world is
    // too small to offer one.
    for (int e = 0; e < params.episode_count; ++e) {
        Rng er = rng.child("episode", static_cast<std::uint64_t>(e));
        const int start = er.below_int(n);
        std::vector<int> candidates;
        for (int g = 0; g < n; ++g) {
            if (g == start) continue;
            const int len = static_cast<int>(w.graph.oracle_path(start, g).size());
            if (len >= params.min_path_nodes && len <= params.max_path_nodes) candidates.push_back(g);
        }
        if (candidates.empty()) {
            for (int g = 0; g < n; ++g)
                if (g != start) candidates.push_back(g);
        }
        const int goal = candidates[er.below(candidates.size())];

        Episode ep;
        ep.start = start;
        ep.goal = goal;
        ep.path = w.graph.oracle_path(start, goal);
        for (std::size_t i = 1; i + 1 < ep.path.size(); ++i) {
            ep.instruction.insert(ep.instruction.end(), {"walk", "past", "the"});
            ep.instruction.push_back(w.graph.node(ep.path[i]).scene);
        }
        ep.instruction.insert(ep.instruction.end(), {"stop", "at", "the"});
        ep.instruction.push_back(w.graph.node(goal).scene);
        ep.validate(w.graph);
        w.episodes.push_back(std::move(ep));
    }
    return w;
}

/// Caption for one sub-view: the node's scene plus the dominant texture
/// (the facing neighbor's texture when the heading looks down a corridor).
inline std::vector<std::string> caption_for_view(const World& w, int node, int heading, int /*elevation*/) {
    const auto& g = w.graph;
    int tex = texture_id_for_scene(g.node(node).scene);
    for (int nb : g.neighbors(node)) {
        if (heading_between(g, node, nb) == heading) {
            tex = texture_id_for_scene(g.node(nb).scene);
            break;
        }
    }
    return text::synth_caption(g.node(node).scene, text::texture_labels()[static_cast<std::size_t>(tex)]);
}

/// MRM class of a node (scene identity at desk scale).
inline int scene_class(const World& w, int node) { return scene_index(w.graph.node(node).scene); }

// ---------------------------------------------------------------------------
// World files
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json world_to_json(const World& w) {
    nlohmann::ordered_json j;
    j["nodes"] = nlohmann::ordered_json::array();
    for (const auto& nd : w.graph.nodes()) {
        nlohmann::ordered_json nj;
        nj["id"] = nd.id;
        nj["pos"] = {nd.pos[0], nd.pos[1], nd.pos[2]};
        nj["pano"] = nd.pano_path;
        nj["scene"] = nd.scene;
        j["nodes"].push_back(nj);
    }
    j["edges"] = nlohmann::ordered_json::array();
    for (const auto& [a, b] : w.graph.edges()) j["edges"].push_back({a, b});
    return j;
}

inline void save_world(const std::string& dir, const World& w) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    {
        std::ofstream os(fs::path(dir) / "world.json.tmp", std::ios::trunc);
        if (!os) throw FormatError("cannot write world.json");
        os << world_to_json(w).dump(2) << "\n";
    }
    fs::rename(fs::path(dir) / "world.json.tmp", fs::path(dir) / "world.json");
    for (const auto& nd : w.graph.nodes())
        pano::save_panorama((fs::path(dir) / nd.pano_path).string(),
                            w.panoramas.at(static_cast<std::size_t>(nd.id)));
    {
        std::ofstream os(fs::path(dir) / "episodes.jsonl.tmp", std::ios::trunc);
        if (!os) throw FormatError("cannot write episodes.jsonl");
        for (const auto& ep : w.episodes) {
            nlohmann::ordered_json j;
            j["instruction"] = ep.instruction;
            j["path"] = ep.path;
            os << j.dump() << "\n";
        }
    }
    fs::rename(fs::path(dir) / "episodes.jsonl.tmp", fs::path(dir) / "episodes.jsonl");
}

inline std::vector<Episode> load_episodes(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open episodes: " + path);
    std::vector<Episode> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("instruction") || !j.contains("path"))
            throw FormatError("bad episode line: " + line);
        Episode ep;
        ep.instruction = j["instruction"].get<std::vector<std::string>>();
        ep.path = j["path"].get<std::vector<int>>();
        if (ep.path.empty()) throw FormatError("episode with empty path");
        ep.start = ep.path.front();
        ep.goal = ep.path.back();
        out.push_back(std::move(ep));
    }
    return out;
}

inline World load_world(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path wpath = fs::path(dir) / "world.json";
    std::ifstream is(wpath);
    if (!is) throw FormatError("cannot open world: " + wpath.string());
    nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
    if (j.is_discarded() || !j.contains("nodes") || !j.contains("edges"))
        throw FormatError("bad world file: " + wpath.string());

    std::vector<GraphNode> nodes;
    for (const auto& nj : j["nodes"]) {
        GraphNode nd;
        nd.id = nj.at("id").get<int>();
        const auto pos = nj.at("pos").get<std::vector<double>>();
        if (pos.size() != 3) throw FormatError("node position must have 3 coordinates");
        nd.pos = {pos[0], pos[1], pos[2]};
        nd.pano_path = nj.at("pano").get<std::string>();
        nd.scene = nj.at("scene").get<std::string>();
        nodes.push_back(std::move(nd));
    }
    std::vector<std::pair<int, int>> edges;
    for (const auto& ej : j["edges"]) {
        const auto e = ej.get<std::vector<int>>();
        if (e.size() != 2) throw FormatError("edge must have 2 endpoints");
        edges.emplace_back(e[0], e[1]);
    }

    World w;
    w.graph = WorldGraph(std::move(nodes), std::move(edges));
    for (const auto& nd : w.graph.nodes())
        w.panoramas.push_back(pano::load_panorama((fs::path(dir) / nd.pano_path).string()));
    if (fs::exists(fs::path(dir) / "episodes.jsonl"))
        w.episodes = load_episodes((fs::path(dir) / "episodes.jsonl").string());
    for (const auto& ep : w.episodes) ep.validate(w.graph);
    return w;
}

} // namespace panolab::world
