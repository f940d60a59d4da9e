#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "deconf/errors.hpp"
#include "deconf/tensor.hpp"

namespace deconf {

inline std::vector<std::string> tokenize(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

inline std::string join(const std::vector<std::string>& words, const std::string& sep = " ") {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out += sep;
        out += words[i];
    }
    return out;
}

/// Word <-> id map. Ids 0, 1, 2 are the begin, end and unknown tokens.
class Vocab {
public:
    static constexpr std::size_t kBos = 0, kEos = 1, kUnk = 2;
    static inline const std::string kBosWord = "<bos>", kEosWord = "<eos>", kUnkWord = "<unk>";

    Vocab() : Vocab(std::vector<std::string>{}) {}

    explicit Vocab(const std::vector<std::string>& words, std::size_t max_len = 12) : max_len_(max_len) {
        for (const auto& w : {kBosWord, kEosWord, kUnkWord}) push(w);
        for (const auto& w : words) {
            if (w.empty() || w.find_first_of(" \t\n") != std::string::npos) throw DataError("invalid vocabulary word '" + w + "'");
            if (index_.count(w)) {
                if (w == kBosWord || w == kEosWord || w == kUnkWord) continue;
                throw DataError("duplicate vocabulary word '" + w + "'");
            }
            push(w);
        }
    }

    std::size_t size() const { return words_.size(); }
    std::size_t max_len() const { return max_len_; }
    void set_max_len(std::size_t n) { max_len_ = n; }
    const std::vector<std::string>& words() const { return words_; }
    bool contains(const std::string& w) const { return index_.count(w) > 0; }
    const std::string& word(std::size_t id) const { return words_.at(id); }

    std::size_t id(const std::string& w) const {
        auto it = index_.find(w);
        return it == index_.end() ? kUnk : it->second;
    }

    /// Content words only, specials excluded.
    std::vector<std::string> content_words() const { return {words_.begin() + 3, words_.end()}; }

    std::vector<std::size_t> encode(const std::string& sentence) const {
        std::vector<std::size_t> ids;
        for (const auto& w : tokenize(sentence)) ids.push_back(id(w));
        return ids;
    }

    /// Stops at the end token; begin tokens are skipped.
    std::string decode(const std::vector<std::size_t>& ids) const {
        std::vector<std::string> out;
        for (std::size_t i : ids) {
            if (i == kEos) break;
            if (i == kBos) continue;
            out.push_back(word(i));
        }
        return join(out);
    }

private:
    void push(const std::string& w) {
        index_[w] = words_.size();
        words_.push_back(w);
    }

    std::vector<std::string> words_;
    std::map<std::string, std::size_t> index_;
    std::size_t max_len_ = 12;
};

/// One word per line as "id<TAB>word"; specials are written too.
inline void save_vocab(const std::string& path, const Vocab& v) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    for (std::size_t i = 0; i < v.size(); ++i) out << i << '\t' << v.word(i) << '\n';
}

inline Vocab load_vocab(const std::string& path, std::size_t max_len = 12) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read '" + path + "'");
    std::vector<std::string> words;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw DataError(path + ":" + std::to_string(lineno) + ": expected id<TAB>word");
        std::size_t id = 0;
        try {
            id = std::stoul(line.substr(0, tab));
        } catch (const std::exception&) {
            throw DataError(path + ":" + std::to_string(lineno) + ": bad id");
        }
        if (id != words.size()) throw DataError(path + ":" + std::to_string(lineno) + ": ids must be consecutive from 0");
        words.push_back(line.substr(tab + 1));
    }
    if (words.size() < 3 || words[0] != Vocab::kBosWord || words[1] != Vocab::kEosWord || words[2] != Vocab::kUnkWord) {
        throw DataError(path + ": vocabulary must start with <bos>, <eos>, <unk>");
    }
    return Vocab({words.begin() + 3, words.end()}, max_len);
}

/// Dense vectors aligned with vocabulary ids.
struct EmbeddingTable {
    Vocab vocab;
    Tensor table;  // [|V|, dim]

    EmbeddingTable(Vocab v, Tensor t) : vocab(std::move(v)), table(std::move(t)) {
        if (table.rank() != 2 || table.dim(0) != vocab.size()) {
            throw ShapeError("embedding table " + shape_str(table.shape()) + " does not cover " +
                             std::to_string(vocab.size()) + " words");
        }
    }

    std::size_t dim() const { return table.dim(1); }
    bool has(const std::string& w) const { return vocab.contains(w); }

    std::vector<double> vector(const std::string& w) const {
        if (!has(w)) throw DataError("no embedding for '" + w + "'");
        const std::size_t i = vocab.id(w), d = dim();
        return {table.data().begin() + i * d, table.data().begin() + (i + 1) * d};
    }
};

}  // namespace deconf
