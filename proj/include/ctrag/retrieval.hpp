#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "ctrag/features.hpp"

namespace ctrag {

/// One (features, snippet) pair of the reference space.
struct ReferenceEntry {
    std::uint64_t entry_id = 0; // dense from 0 within a partition
    std::string pathology_id;
    FeatureVector features;
    std::string snippet;
    std::string source_id;
};

/// Per-dimension population moments of one partition, after the
/// zero-variance rule (std < 1e-12 becomes 1.0).
struct PartitionStats {
    std::vector<double> means;
    std::vector<double> stds;
};

struct Neighbor {
    std::uint64_t entry_id = 0;
    double distance = 0.0;
    std::string snippet;
};

/// k nearest entries, distances nondecreasing, ties broken by entry_id.
struct RetrievalResult {
    std::vector<Neighbor> neighbors;
};

/// Pathology-partitioned reference space with exact standardized-L2 search.
/// Immutable after build; concurrent queries need no synchronization.
class Index {
public:
    static Index build(std::vector<ReferenceEntry> entries);

    /// Exact top-k by Euclidean distance on standardized vectors. Returns
    /// fewer than k only when the partition is smaller than k.
    RetrievalResult knn_query(std::string_view pathology_id, const FeatureVector& query,
                              std::size_t k) const;

    /// (value - mean) / std per dimension, in schema order.
    std::vector<double> standardize(std::string_view pathology_id,
                                    const FeatureVector& query) const;

    const PartitionStats& stats(std::string_view pathology_id) const;
    bool has_partition(std::string_view pathology_id) const;
    std::vector<std::string> partition_ids() const;
    std::size_t partition_size(std::string_view pathology_id) const;
    const std::string& schema_id() const { return schema_id_; }

    void save(std::ostream& sink) const;
    static Index load(std::istream& source);
    void save_file(const std::filesystem::path& path) const;
    static Index load_file(const std::filesystem::path& path);

private:
    struct Partition {
        std::vector<std::string> feature_names;
        PartitionStats stats;
        std::vector<ReferenceEntry> entries;      // sorted by entry_id
        std::vector<double> standardized;         // row-major, entries x d
    };

    const Partition& partition(std::string_view pathology_id) const;

    std::string schema_id_;
    std::map<std::string, Partition> partitions_;
};

} // namespace ctrag
