#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "panolab/autodiff.hpp"
#include "panolab/checkpoint.hpp"
#include "panolab/common.hpp"
#include "panolab/lora.hpp"
#include "panolab/rng.hpp"

namespace panolab::text {

constexpr const char* kPad = "[PAD]";
constexpr const char* kMask = "[MASK]";
constexpr const char* kCls = "[CLS]";

inline const std::vector<std::string>& scene_labels() {
    static const std::vector<std::string> labels = {
        "kitchen", "bathroom", "bedroom", "office",   "hallway", "library",
        "lobby",   "garage",   "studio",  "workshop", "attic",   "pantry"};
    return labels;
}

inline const std::vector<std::string>& texture_labels() {
    static const std::vector<std::string> labels = {"checker", "stripes", "dots",   "gradient",
                                                    "rings",   "waves",   "bricks", "speckle"};
    return labels;
}

/// Dense-id token table. The pipeline vocabulary is a fixed constant (scene
/// and texture lexicons are procedural), so checkpoints never need to carry
/// it.
class Vocabulary {
public:
    explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second)
                throw ValueError("duplicate vocabulary token: " + tokens_[i]);
        }
        if (!ids_.count(kMask)) throw ValueError("vocabulary must contain [MASK]");
    }

    static const Vocabulary& standard() {
        static const Vocabulary vocab = [] {
            std::vector<std::string> tokens = {kPad, kMask, kCls, "a",    "photo", "of",
                                               "walk", "past", "the", "stop", "at"};
            for (const auto& s : scene_labels()) tokens.push_back(s);
            for (const auto& t : texture_labels()) tokens.push_back(t);
            return Vocabulary(std::move(tokens));
        }();
        return vocab;
    }

    int id(const std::string& token) const {
        auto it = ids_.find(token);
        if (it == ids_.end()) throw ValueError("token not in vocabulary: " + token);
        return it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || id >= static_cast<int>(tokens_.size())) throw ValueError("token id out of range");
        return tokens_[static_cast<std::size_t>(id)];
    }

    std::vector<int> encode(const std::vector<std::string>& tokens) const {
        std::vector<int> ids;
        ids.reserve(tokens.size());
        for (const auto& t : tokens) ids.push_back(id(t));
        return ids;
    }

    int size() const { return static_cast<int>(tokens_.size()); }
    int mask_id() const { return id(kMask); }
    int pad_id() const { return id(kPad); }

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> ids_;
};

/// Deterministic stand-in captioner: a fixed "a photo of <texture> <scene>"
/// template from the scene label and the view's dominant texture.
inline std::vector<std::string> synth_caption(const std::string& scene, const std::string& texture) {
    if (scene.empty() || texture.empty()) throw ValueError("caption requires scene and texture metadata");
    return {"a", "photo", "of", texture, scene};
}

// ---------------------------------------------------------------------------
// Text encoder
// ---------------------------------------------------------------------------

struct TextEncoderConfig {
    int vocab_size = 0;
    int embed_dim = 16;
    int cond_dim = 16;

    void validate() const {
        if (vocab_size < 2 || embed_dim < 1 || cond_dim < 1) throw ValueError("bad text encoder config");
    }
};

/// Mean-pooled bag-of-embeddings with a projection to the conditioning
/// space. Order-invariant by construction.
class TextEncoder {
public:
    TextEncoder(TextEncoderConfig cfg, const Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        params_.add_normal("enc.emb", {cfg_.vocab_size, cfg_.embed_dim}, rng,
                           1.0 / std::sqrt(cfg_.embed_dim));
        params_.add_normal("enc.proj", {cfg_.embed_dim, cfg_.cond_dim}, rng,
                           1.0 / std::sqrt(cfg_.embed_dim));
    }

    const TextEncoderConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    /// [1 x cond_dim] conditioning vector; differentiable. Pooling runs over
    /// sorted ids so token permutations produce bitwise-identical output.
    ad::Tensor encode(ad::Tape& tape, const std::vector<int>& token_ids,
                      lora::AdapterSet* adapters = nullptr, bool train_base = false) {
        if (token_ids.empty()) throw ValueError("encode_text: empty token sequence");
        for (int id : token_ids)
            if (id < 0 || id >= cfg_.vocab_size) throw ValueError("encode_text: token id out of range");
        std::vector<int> sorted = token_ids;
        std::sort(sorted.begin(), sorted.end());
        ad::Param& emb = params_.at("enc.emb");
        ad::Tensor table = train_base ? tape.leaf(emb) : ad::Tensor::constant(emb.shape, emb.value);
        ad::Tensor pooled = ad::mean_rows(ad::gather_rows(table, sorted));
        return lora::adapted_matmul(tape, pooled, params_.at("enc.proj"), adapters, train_base);
    }

    std::vector<double> encode_value(const std::vector<int>& token_ids,
                                     lora::AdapterSet* adapters = nullptr) {
        ad::Tape tape;
        return encode(tape, token_ids, adapters, false).data();
    }

    ParamStore to_store() const {
        ParamStore store;
        for (const auto& [name, p] : params_) store.add(name, p.shape, p.value);
        store.add("enc.meta.cond_dim", {1}, {static_cast<double>(cfg_.cond_dim)});
        store.add("enc.meta.embed_dim", {1}, {static_cast<double>(cfg_.embed_dim)});
        store.add("enc.meta.vocab_size", {1}, {static_cast<double>(cfg_.vocab_size)});
        return store;
    }

    static TextEncoder from_store(const ParamStore& store) {
        TextEncoderConfig cfg;
        cfg.cond_dim = static_cast<int>(store.at("enc.meta.cond_dim").value[0]);
        cfg.embed_dim = static_cast<int>(store.at("enc.meta.embed_dim").value[0]);
        cfg.vocab_size = static_cast<int>(store.at("enc.meta.vocab_size").value[0]);
        TextEncoder enc(cfg, Rng(0));
        for (auto& [name, p] : enc.params_) {
            const ad::Param& src = store.at(name);
            if (src.shape != p.shape) throw FormatError("text encoder shape mismatch: " + name);
            p.value = src.value;
        }
        return enc;
    }

private:
    TextEncoderConfig cfg_;
    ParamStore params_;
};

// ---------------------------------------------------------------------------
// Caption-pair dataset (JSON Lines)
// ---------------------------------------------------------------------------

struct CaptionPair {
    std::string image_ref; // "<pano path>#<heading>,<elevation>"
    std::vector<std::string> caption;
};

inline std::string make_image_ref(const std::string& pano_path, int heading, int elevation) {
    return pano_path + "#" + std::to_string(heading) + "," + std::to_string(elevation);
}

inline void parse_image_ref(const std::string& ref, std::string& pano_path, int& heading, int& elevation) {
    const auto hash = ref.rfind('#');
    const auto comma = ref.rfind(',');
    if (hash == std::string::npos || comma == std::string::npos || comma < hash)
        throw FormatError("bad image reference: " + ref);
    pano_path = ref.substr(0, hash);
    heading = std::stoi(ref.substr(hash + 1, comma - hash - 1));
    elevation = std::stoi(ref.substr(comma + 1));
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i];
    }
    return out;
}

inline std::vector<std::string> split_tokens(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

inline void write_pairs(std::ostream& os, const std::vector<CaptionPair>& pairs) {
    for (const auto& p : pairs) {
        if (p.caption.empty()) throw ValueError("caption pair with empty caption");
        nlohmann::ordered_json j;
        j["image"] = p.image_ref;
        j["caption"] = join_tokens(p.caption);
        os << j.dump() << "\n";
    }
}

inline std::vector<CaptionPair> read_pairs(std::istream& is) {
    std::vector<CaptionPair> pairs;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("image") || !j.contains("caption"))
            throw FormatError("bad caption pair line: " + line);
        CaptionPair p;
        p.image_ref = j["image"].get<std::string>();
        p.caption = split_tokens(j["caption"].get<std::string>());
        if (p.caption.empty()) throw FormatError("empty caption in pair file");
        pairs.push_back(std::move(p));
    }
    return pairs;
}

inline void save_pairs(const std::string& path, const std::vector<CaptionPair>& pairs) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::trunc);
        if (!os) throw FormatError("cannot open for write: " + tmp.string());
        write_pairs(os, pairs);
    }
    fs::rename(tmp, target);
}

inline std::vector<CaptionPair> load_pairs(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open pair file: " + path);
    return read_pairs(is);
}

} // namespace panolab::text
