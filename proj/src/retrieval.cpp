#include "ctrag/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ctrag/errors.hpp"
#include "ctrag/kernels.hpp"

namespace ctrag {

namespace {

constexpr double kZeroVarianceFloor = 1e-12;

PartitionStats compute_stats(const std::vector<ReferenceEntry>& entries, std::size_t d) {
    PartitionStats stats;
    stats.means.assign(d, 0.0);
    stats.stds.assign(d, 0.0);
    const double n = static_cast<double>(entries.size());
    std::vector<bool> constant(d, true);
    for (const auto& entry : entries) {
        for (std::size_t j = 0; j < d; ++j) {
            stats.means[j] += entry.features.values[j];
            constant[j] = constant[j] &&
                          entry.features.values[j] == entries.front().features.values[j];
        }
    }
    for (std::size_t j = 0; j < d; ++j) {
        stats.means[j] /= n;
    }
    for (const auto& entry : entries) {
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = entry.features.values[j] - stats.means[j];
            stats.stds[j] += diff * diff;
        }
    }
    for (std::size_t j = 0; j < d; ++j) {
        stats.stds[j] = std::sqrt(stats.stds[j] / n);
        // Exactly-constant dimensions are inert at any magnitude; the summed
        // mean can carry rounding noise above the floor for large values.
        if (constant[j]) {
            stats.means[j] = entries.front().features.values[j];
            stats.stds[j] = 1.0;
        } else if (stats.stds[j] < kZeroVarianceFloor) {
            stats.stds[j] = 1.0;
        }
    }
    return stats;
}

std::vector<double> standardize_values(const std::vector<double>& values,
                                       const PartitionStats& stats) {
    std::vector<double> out(values.size());
    for (std::size_t j = 0; j < values.size(); ++j) {
        out[j] = (values[j] - stats.means[j]) / stats.stds[j];
    }
    return out;
}

} // namespace

Index Index::build(std::vector<ReferenceEntry> entries) {
    Index index;
    for (auto& entry : entries) {
        if (entry.snippet.empty()) {
            throw ValidationError("entry " + std::to_string(entry.entry_id) +
                                  " has an empty snippet");
        }
        if (entry.features.pathology_id != entry.pathology_id) {
            throw ValidationError("entry " + std::to_string(entry.entry_id) +
                                  " features belong to a different pathology");
        }
        auto& partition = index.partitions_[entry.pathology_id];
        partition.entries.push_back(std::move(entry));
    }

    for (auto& [pathology_id, partition] : index.partitions_) {
        auto& list = partition.entries;
        std::sort(list.begin(), list.end(),
                  [](const ReferenceEntry& a, const ReferenceEntry& b) {
                      return a.entry_id < b.entry_id;
                  });
        partition.feature_names = list.front().features.names;
        const std::string& schema = list.front().features.schema_id;
        if (index.schema_id_.empty()) {
            index.schema_id_ = schema;
        }
        for (std::size_t i = 0; i < list.size(); ++i) {
            const auto& entry = list[i];
            if (entry.entry_id != i) {
                if (i > 0 && entry.entry_id == list[i - 1].entry_id) {
                    throw ValidationError("duplicate entry_id " +
                                          std::to_string(entry.entry_id) +
                                          " in partition \"" + pathology_id + "\"");
                }
                throw ValidationError("entry ids in partition \"" + pathology_id +
                                      "\" must be dense from 0");
            }
            if (entry.features.schema_id != index.schema_id_ ||
                entry.features.names != partition.feature_names) {
                throw ValidationError("schema mismatch within partition \"" +
                                      pathology_id + "\"");
            }
        }
        const std::size_t d = partition.feature_names.size();
        partition.stats = compute_stats(list, d);
        partition.standardized.reserve(list.size() * d);
        for (const auto& entry : list) {
            const auto row = standardize_values(entry.features.values, partition.stats);
            partition.standardized.insert(partition.standardized.end(), row.begin(), row.end());
        }
    }
    return index;
}

const Index::Partition& Index::partition(std::string_view pathology_id) const {
    const auto it = partitions_.find(std::string(pathology_id));
    if (it == partitions_.end()) {
        throw ValidationError("unknown pathology \"" + std::string(pathology_id) +
                              "\": no such partition");
    }
    return it->second;
}

bool Index::has_partition(std::string_view pathology_id) const {
    return partitions_.contains(std::string(pathology_id));
}

std::vector<std::string> Index::partition_ids() const {
    std::vector<std::string> ids;
    ids.reserve(partitions_.size());
    for (const auto& [pathology_id, _] : partitions_) {
        ids.push_back(pathology_id);
    }
    return ids;
}

std::size_t Index::partition_size(std::string_view pathology_id) const {
    return partition(pathology_id).entries.size();
}

const PartitionStats& Index::stats(std::string_view pathology_id) const {
    return partition(pathology_id).stats;
}

std::vector<double> Index::standardize(std::string_view pathology_id,
                                       const FeatureVector& query) const {
    const Partition& p = partition(pathology_id);
    if (query.names != p.feature_names || query.schema_id != schema_id_) {
        throw ValidationError("query schema does not match partition \"" +
                              std::string(pathology_id) + "\"");
    }
    return standardize_values(query.values, p.stats);
}

RetrievalResult Index::knn_query(std::string_view pathology_id, const FeatureVector& query,
                                 std::size_t k) const {
    if (k == 0) {
        throw ValidationError("k must be a positive integer");
    }
    const Partition& p = partition(pathology_id);
    const std::vector<double> q = standardize(pathology_id, query);
    const std::size_t n = p.entries.size();
    const std::size_t d = p.feature_names.size();

    std::vector<double> squared(n);
    kernels::l2_squared_batch(q.data(), p.standardized.data(), n, d, squared.data());

    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const std::size_t take = std::min(k, n);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take),
                      order.end(), [&squared](std::uint32_t a, std::uint32_t b) {
                          if (squared[a] != squared[b]) {
                              return squared[a] < squared[b];
                          }
                          return a < b; // entry ids are dense, so index order is id order
                      });

    RetrievalResult result;
    result.neighbors.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        const auto idx = order[i];
        result.neighbors.push_back(Neighbor{p.entries[idx].entry_id,
                                            std::sqrt(squared[idx]),
                                            p.entries[idx].snippet});
    }
    return result;
}

namespace {

nlohmann::ordered_json entry_to_json(const ReferenceEntry& entry) {
    nlohmann::ordered_json j;
    j["kind"] = "entry";
    j["pathology"] = entry.pathology_id;
    j["entry_id"] = entry.entry_id;
    nlohmann::ordered_json feats;
    for (std::size_t i = 0; i < entry.features.names.size(); ++i) {
        feats[entry.features.names[i]] = entry.features.values[i];
    }
    j["features"] = std::move(feats);
    auto undef = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < entry.features.names.size(); ++i) {
        if (entry.features.undefined[i]) {
            undef.push_back(entry.features.names[i]);
        }
    }
    j["undefined"] = std::move(undef);
    j["snippet"] = entry.snippet;
    j["source_id"] = entry.source_id;
    return j;
}

[[noreturn]] void line_error(std::size_t line_no, const std::string& what) {
    throw FormatError("index line " + std::to_string(line_no) + ": " + what);
}

} // namespace

void Index::save(std::ostream& sink) const {
    nlohmann::ordered_json stats_line;
    stats_line["kind"] = "stats";
    stats_line["schema_id"] = schema_id_;
    nlohmann::ordered_json parts;
    for (const auto& [pathology_id, partition] : partitions_) {
        nlohmann::ordered_json p;
        nlohmann::ordered_json means;
        nlohmann::ordered_json stds;
        for (std::size_t j = 0; j < partition.feature_names.size(); ++j) {
            means[partition.feature_names[j]] = partition.stats.means[j];
            stds[partition.feature_names[j]] = partition.stats.stds[j];
        }
        p["means"] = std::move(means);
        p["stds"] = std::move(stds);
        parts[pathology_id] = std::move(p);
    }
    stats_line["partitions"] = std::move(parts);
    sink << stats_line.dump() << '\n';

    for (const auto& [pathology_id, partition] : partitions_) {
        for (const auto& entry : partition.entries) {
            sink << entry_to_json(entry).dump() << '\n';
        }
    }
    if (!sink) {
        throw IoError("index write failed");
    }
}

Index Index::load(std::istream& source) {
    std::string line;
    std::size_t line_no = 0;

    if (!std::getline(source, line)) {
        throw FormatError("index is empty: missing stats line");
    }
    ++line_no;
    nlohmann::ordered_json stats_line;
    try {
        stats_line = nlohmann::ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        line_error(line_no, std::string("malformed JSON: ") + e.what());
    }
    if (stats_line.value("kind", "") != "stats") {
        line_error(line_no, "first line must have kind \"stats\"");
    }

    Index index;
    index.schema_id_ = stats_line.at("schema_id").get<std::string>();
    for (const auto& [pathology_id, p] : stats_line.at("partitions").items()) {
        Partition partition;
        for (const auto& [name, value] : p.at("means").items()) {
            partition.feature_names.push_back(name);
            partition.stats.means.push_back(value.get<double>());
        }
        for (const auto& [name, value] : p.at("stds").items()) {
            const double std_value = value.get<double>();
            if (!(std_value > 0.0)) {
                line_error(line_no, "std for \"" + name + "\" must be strictly positive");
            }
            partition.stats.stds.push_back(std_value);
        }
        if (partition.stats.stds.size() != partition.stats.means.size()) {
            line_error(line_no, "means/stds size mismatch for partition \"" + pathology_id + "\"");
        }
        index.partitions_.emplace(pathology_id, std::move(partition));
    }

    while (std::getline(source, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        nlohmann::ordered_json j;
        try {
            j = nlohmann::ordered_json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            line_error(line_no, std::string("malformed JSON: ") + e.what());
        }
        if (j.value("kind", "") != "entry") {
            line_error(line_no, "expected kind \"entry\"");
        }
        for (const char* field : {"pathology", "entry_id", "features", "snippet", "source_id"}) {
            if (!j.contains(field)) {
                line_error(line_no, std::string("missing ") + field + " field");
            }
        }
        ReferenceEntry entry;
        entry.pathology_id = j.at("pathology").get<std::string>();
        entry.entry_id = j.at("entry_id").get<std::uint64_t>();
        entry.snippet = j.at("snippet").get<std::string>();
        entry.source_id = j.at("source_id").get<std::string>();
        entry.features.schema_id = index.schema_id_;
        entry.features.pathology_id = entry.pathology_id;
        for (const auto& [name, value] : j.at("features").items()) {
            entry.features.names.push_back(name);
            entry.features.values.push_back(value.get<double>());
            entry.features.undefined.push_back(false);
        }
        for (const auto& name : j.value("undefined", nlohmann::ordered_json::array())) {
            const auto it = std::find(entry.features.names.begin(), entry.features.names.end(),
                                      name.get<std::string>());
            if (it == entry.features.names.end()) {
                line_error(line_no, "undefined flag names unknown feature");
            }
            entry.features.undefined[static_cast<std::size_t>(
                it - entry.features.names.begin())] = true;
        }

        const auto partition_it = index.partitions_.find(entry.pathology_id);
        if (partition_it == index.partitions_.end()) {
            line_error(line_no, "entry partition \"" + entry.pathology_id +
                                    "\" missing from the stats line");
        }
        if (entry.features.names != partition_it->second.feature_names) {
            line_error(line_no, "entry features do not match the partition schema");
        }
        partition_it->second.entries.push_back(std::move(entry));
    }

    for (auto& [pathology_id, partition] : index.partitions_) {
        if (partition.entries.empty()) {
            throw FormatError("stats/entry partition mismatch: partition \"" + pathology_id +
                              "\" has stats but no entries");
        }
        auto& list = partition.entries;
        std::sort(list.begin(), list.end(),
                  [](const ReferenceEntry& a, const ReferenceEntry& b) {
                      return a.entry_id < b.entry_id;
                  });
        for (std::size_t i = 0; i < list.size(); ++i) {
            if (list[i].entry_id != i) {
                throw FormatError("entry ids in partition \"" + pathology_id +
                                  "\" must be dense from 0");
            }
        }
        const std::size_t d = partition.feature_names.size();
        partition.standardized.reserve(list.size() * d);
        for (const auto& entry : list) {
            const auto row = standardize_values(entry.features.values, partition.stats);
            partition.standardized.insert(partition.standardized.end(), row.begin(), row.end());
        }
    }
    return index;
}

void Index::save_file(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open index \"" + path.string() + "\" for writing");
    }
    save(out);
}

Index Index::load_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open index \"" + path.string() + "\" for reading");
    }
    return load(in);
}

} // namespace ctrag
