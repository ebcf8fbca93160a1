#include <fstream>
#include <sstream>

#include "infosteer/error.hpp"
#include "infosteer/finegrain.hpp"
#include "infosteer/text.hpp"

namespace infosteer {

namespace {

constexpr const char* kClustersMagic = "infosteer-clusters v1";
constexpr const char* kSurrogatesMagic = "infosteer-surrogates v1";

class LineReader {
public:
    explicit LineReader(const std::filesystem::path& path) : path_(path), in_(path) {
        if (!in_) {
            throw IoError("cannot open " + path.string());
        }
    }

    std::string next() {
        std::string line;
        while (std::getline(in_, line)) {
            ++number_;
            const auto t = text::trim(line);
            if (!t.empty() && t.front() != '#') {
                return std::string(t);
            }
        }
        fail("unexpected end of file");
    }

    // Reads "<key> <value>" and returns the value.
    std::string keyed(const std::string& key) {
        std::istringstream ss(next());
        std::string k;
        std::string v;
        ss >> k >> v;
        if (k != key || v.empty()) {
            fail("expected '" + key + " <value>'");
        }
        return v;
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw DataError(path_.string() + ":" + std::to_string(number_) + ": " + what);
    }

private:
    std::filesystem::path path_;
    std::ifstream in_;
    std::size_t number_ = 0;
};

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    return out;
}

void close_out(std::ofstream& out, const std::filesystem::path& path) {
    out.flush();
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

}  // namespace

void write_clusters(const std::filesystem::path& path, const LayerClusters& clusters, std::uint64_t seed) {
    std::ofstream out = open_out(path);
    out << kClustersMagic << '\n';
    out << "seed " << seed << '\n';
    out << "layers " << clusters.layers.size() << '\n';
    for (std::size_t l = 0; l < clusters.layers.size(); ++l) {
        const auto& a = clusters.layers[l];
        a.validate();
        out << "layer " << (l + 1) << " width " << a.group.size() << " groups " << a.group_count << " residual "
            << (a.residual ? std::to_string(*a.residual) : "none") << " stage " << to_string(a.stage) << '\n';
        for (std::size_t i = 0; i < a.group.size(); ++i) {
            out << i << ' ' << a.group[i] << '\n';
        }
    }
    close_out(out, path);
}

LayerClusters read_clusters(const std::filesystem::path& path) {
    LineReader in(path);
    if (in.next() != kClustersMagic) {
        in.fail("not a clusters sidecar (expected '" + std::string(kClustersMagic) + "')");
    }
    in.keyed("seed");
    const std::size_t n_layers = text::parse_size(in.keyed("layers"), "layers");
    LayerClusters clusters;
    for (std::size_t l = 0; l < n_layers; ++l) {
        std::istringstream header(in.next());
        std::string w[10];
        for (auto& s : w) {
            header >> s;
        }
        if (w[0] != "layer" || w[2] != "width" || w[4] != "groups" || w[6] != "residual" || w[8] != "stage") {
            in.fail("malformed layer header");
        }
        if (text::parse_size(w[1], "layer") != l + 1) {
            in.fail("layers out of order");
        }
        ClusterAssignment a;
        const std::size_t width = text::parse_size(w[3], "width");
        a.group_count = text::parse_size(w[5], "groups");
        if (w[7] != "none") {
            a.residual = text::parse_size(w[7], "residual");
        }
        a.stage = parse_cluster_stage(w[9]);
        a.group.resize(width);
        for (std::size_t i = 0; i < width; ++i) {
            std::istringstream row(in.next());
            std::string idx;
            std::string g;
            row >> idx >> g;
            if (text::parse_size(idx, "index") != i) {
                in.fail("memory indices out of order");
            }
            a.group[i] = text::parse_size(g, "group");
        }
        a.validate();
        clusters.layers.push_back(std::move(a));
    }
    return clusters;
}

void write_surrogates(const std::filesystem::path& path, const SurrogateTable& table) {
    std::ofstream out = open_out(path);
    out << kSurrogatesMagic << '\n';
    out << "lambda1 " << text::format_double(table.lambda1) << '\n';
    out << "lambda2 " << text::format_double(table.lambda2) << '\n';
    out << "target " << to_string(table.target) << '\n';
    out << "layers " << table.layers.size() << '\n';
    for (std::size_t l = 0; l < table.layers.size(); ++l) {
        const auto& layer = table.layers[l];
        if (layer.entropy.size() != layer.width || layer.score.size() != layer.width ||
            layer.specificity.size() != layer.width) {
            throw DataError("write_surrogates: layer " + std::to_string(l + 1) + " is not scored");
        }
        out << "layer " << (l + 1) << " width " << layer.width << " vocab " << layer.vocab << '\n';
        out << "# index entropy specificity score\n";
        for (std::size_t i = 0; i < layer.width; ++i) {
            out << i << ' ' << text::format_double(layer.entropy[i]) << ' '
                << text::format_double(layer.specificity[i]) << ' ' << text::format_double(layer.score[i]) << '\n';
        }
    }
    close_out(out, path);
}

SurrogateTable read_surrogates(const std::filesystem::path& path) {
    LineReader in(path);
    if (in.next() != kSurrogatesMagic) {
        in.fail("not a surrogates sidecar (expected '" + std::string(kSurrogatesMagic) + "')");
    }
    SurrogateTable table;
    table.lambda1 = text::parse_double(in.keyed("lambda1"), "lambda1");
    table.lambda2 = text::parse_double(in.keyed("lambda2"), "lambda2");
    table.target = parse_surrogate_target(in.keyed("target"));
    const std::size_t n_layers = text::parse_size(in.keyed("layers"), "layers");
    for (std::size_t l = 0; l < n_layers; ++l) {
        std::istringstream header(in.next());
        std::string w[6];
        for (auto& s : w) {
            header >> s;
        }
        if (w[0] != "layer" || w[2] != "width" || w[4] != "vocab") {
            in.fail("malformed layer header");
        }
        SurrogateLayer layer;
        layer.width = text::parse_size(w[3], "width");
        layer.vocab = text::parse_size(w[5], "vocab");
        for (std::size_t i = 0; i < layer.width; ++i) {
            std::istringstream row(in.next());
            std::string idx;
            std::string h;
            std::string s;
            std::string sc;
            row >> idx >> h >> s >> sc;
            if (text::parse_size(idx, "index") != i) {
                in.fail("memory indices out of order");
            }
            layer.entropy.push_back(text::parse_double(h, "entropy"));
            layer.specificity.push_back(text::parse_double(s, "specificity"));
            layer.score.push_back(text::parse_double(sc, "score"));
        }
        table.layers.push_back(std::move(layer));
    }
    return table;
}

}  // namespace infosteer
