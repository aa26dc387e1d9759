#pragma once

// Embedding tables and preference datasets on disk.
//
// PEMB matrix file, little-endian:
//   offset 0   "PEMB"            4 bytes
//   offset 4   version (u8) = 1
//   offset 5   reserved, 3 zero bytes
//   offset 8   d  (u32)
//   offset 12  n  (u64)
//   offset 20  n*d IEEE-754 binary32 values, row-major
// Sidecar metadata is JSONL, one record per row:
//   {"row": k, "id": "...", "uri": "..." (optional), "score": x (optional)}
// Pairs files are JSONL: {"winner": id, "loser": id, "query_id"?: id, "tie"?: bool}.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prefadapt/embedding.hpp"
#include "prefadapt/errors.hpp"
#include "prefadapt/prefcore.hpp"
#include "prefadapt/rng.hpp"

namespace prefadapt {

inline constexpr std::array<char, 4> kPembMagic = {'P', 'E', 'M', 'B'};
inline constexpr std::uint8_t kPembVersion = 1;
inline constexpr std::size_t kPembHeaderSize = 20;

struct RowMeta {
  std::optional<std::string> uri;
  std::optional<double> score;

  friend bool operator==(const RowMeta&, const RowMeta&) = default;
};

class EmbeddingTable {
 public:
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {
    if (dim == 0) throw ValidationError("embedding table dimension must be >= 1");
  }

  void add(std::string id, Embedding row, RowMeta meta = {}) {
    if (row.dim() != dim_) {
      throw ValidationError("row '" + id + "' has dimension " + std::to_string(row.dim()) +
                            ", table has " + std::to_string(dim_));
    }
    if (index_.contains(id)) throw ValidationError("duplicate id '" + id + "'");
    index_.emplace(id, rows_.size());
    ids_.push_back(std::move(id));
    rows_.push_back(std::move(row));
    meta_.push_back(std::move(meta));
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return rows_.size(); }
  bool empty() const noexcept { return rows_.empty(); }

  const std::string& id(std::size_t row) const { return ids_.at(row); }
  const Embedding& row(std::size_t row) const { return rows_.at(row); }
  const RowMeta& meta(std::size_t row) const { return meta_.at(row); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t index_of(const std::string& id) const {
    auto found = find(id);
    if (!found) throw NotFoundError("unknown id '" + id + "'", {id});
    return *found;
  }

  const Embedding& at(const std::string& id) const { return rows_[index_of(id)]; }

 private:
  std::size_t dim_;
  std::vector<std::string> ids_;
  std::vector<Embedding> rows_;
  std::vector<RowMeta> meta_;
  std::unordered_map<std::string, std::size_t> index_;
};

using TablePtr = std::shared_ptr<const EmbeddingTable>;

struct PairRecord {
  std::size_t winner = 0;
  std::size_t loser = 0;
  std::optional<std::string> query_id;

  friend bool operator==(const PairRecord&, const PairRecord&) = default;
};

// Winner-first pairs over one table. Self-pairs cannot be added.
class PreferenceDataset {
 public:
  explicit PreferenceDataset(TablePtr table) : table_(std::move(table)) {
    if (!table_) throw ValidationError("preference dataset needs a table");
  }

  void add(PairRecord record) {
    if (record.winner >= table_->size() || record.loser >= table_->size()) {
      throw ValidationError("pair references a row outside the table");
    }
    if (record.winner == record.loser) {
      throw ValidationError("self-pair on id '" + table_->id(record.winner) + "'");
    }
    pairs_.push_back(std::move(record));
  }

  void add(const std::string& winner_id, const std::string& loser_id) {
    add(PairRecord{table_->index_of(winner_id), table_->index_of(loser_id), std::nullopt});
  }

  const EmbeddingTable& table() const noexcept { return *table_; }
  const TablePtr& table_ptr() const noexcept { return table_; }
  std::size_t size() const noexcept { return pairs_.size(); }
  bool empty() const noexcept { return pairs_.empty(); }
  const std::vector<PairRecord>& records() const noexcept { return pairs_; }
  const PairRecord& operator[](std::size_t i) const { return pairs_[i]; }

  std::size_t ties_dropped() const noexcept { return ties_dropped_; }
  void set_ties_dropped(std::size_t n) noexcept { ties_dropped_ = n; }

  // Views into the table; valid while the table is alive.
  std::vector<PreferencePair> pairs() const {
    std::vector<PreferencePair> out;
    out.reserve(pairs_.size());
    for (const auto& r : pairs_) out.push_back({table_->row(r.winner), table_->row(r.loser)});
    return out;
  }

  std::vector<std::span<const double>> winners() const {
    std::vector<std::span<const double>> out;
    out.reserve(pairs_.size());
    for (const auto& r : pairs_) out.push_back(table_->row(r.winner).values());
    return out;
  }

  PreferenceDataset subset(std::span<const std::size_t> indices) const {
    PreferenceDataset out(table_);
    out.pairs_.reserve(indices.size());
    for (std::size_t i : indices) out.pairs_.push_back(pairs_.at(i));
    return out;
  }

 private:
  TablePtr table_;
  std::vector<PairRecord> pairs_;
  std::size_t ties_dropped_ = 0;
};

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
  }
}

template <typename T>
T get_le(std::span<const unsigned char> bytes, std::size_t offset) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(static_cast<T>(bytes[offset + i]) << (8 * i));
  }
  return value;
}

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on '" + path + "'");
  return bytes;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failure on '" + path + "'");
}

inline std::string line_context(const std::string& path, std::size_t line) {
  return path + ":" + std::to_string(line);
}

}  // namespace detail

inline std::string encode_pemb(const EmbeddingTable& table) {
  std::string out;
  out.reserve(kPembHeaderSize + table.size() * table.dim() * 4);
  out.append(kPembMagic.data(), kPembMagic.size());
  out.push_back(static_cast<char>(kPembVersion));
  out.append(3, '\0');
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(table.dim()));
  detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(table.size()));
  for (std::size_t r = 0; r < table.size(); ++r) {
    for (double v : table.row(r).values()) {
      detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  return out;
}

struct PembMatrix {
  std::size_t dim = 0;
  std::size_t rows = 0;
  std::vector<float> values;
};

inline PembMatrix decode_pemb(std::span<const unsigned char> bytes, const std::string& origin = "<memory>") {
  if (bytes.size() < kPembMagic.size() ||
      !std::equal(kPembMagic.begin(), kPembMagic.end(), bytes.begin(),
                  [](char a, unsigned char b) { return static_cast<unsigned char>(a) == b; })) {
    throw FormatError(origin + ": bad magic, not a PEMB file");
  }
  if (bytes.size() < kPembHeaderSize) throw CorruptionError(origin + ": truncated header");
  if (bytes[4] != kPembVersion) {
    throw FormatError(origin + ": unsupported PEMB version " + std::to_string(bytes[4]));
  }
  if (bytes[5] != 0 || bytes[6] != 0 || bytes[7] != 0) {
    throw FormatError(origin + ": reserved header bytes are not zero");
  }
  PembMatrix m;
  m.dim = detail::get_le<std::uint32_t>(bytes, 8);
  const auto n = detail::get_le<std::uint64_t>(bytes, 12);
  if (m.dim == 0) throw CorruptionError(origin + ": header dimension is 0");
  const std::size_t payload = bytes.size() - kPembHeaderSize;
  if (payload % 4 != 0 || n > payload / 4 / m.dim || n * m.dim * 4 != payload) {
    throw CorruptionError(origin + ": header declares d=" + std::to_string(m.dim) +
                          ", n=" + std::to_string(n) + " but payload has " +
                          std::to_string(payload) + " bytes");
  }
  m.rows = static_cast<std::size_t>(n);
  m.values.resize(m.rows * m.dim);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    m.values[i] = std::bit_cast<float>(
        detail::get_le<std::uint32_t>(bytes, kPembHeaderSize + 4 * i));
  }
  return m;
}

inline std::string encode_meta(const EmbeddingTable& table) {
  std::string out;
  for (std::size_t r = 0; r < table.size(); ++r) {
    nlohmann::ordered_json rec;
    rec["row"] = r;
    rec["id"] = table.id(r);
    const auto& meta = table.meta(r);
    if (meta.uri) rec["uri"] = *meta.uri;
    if (meta.score) rec["score"] = *meta.score;
    out += rec.dump();
    out += '\n';
  }
  return out;
}

inline void save_embeddings(const EmbeddingTable& table, const std::string& matrix_path,
                            const std::string& meta_path) {
  detail::write_file(matrix_path, encode_pemb(table));
  detail::write_file(meta_path, encode_meta(table));
}

inline EmbeddingTable load_embeddings(const std::string& matrix_path, const std::string& meta_path) {
  const auto matrix = decode_pemb(detail::read_file(matrix_path), matrix_path);

  std::ifstream meta_in(meta_path);
  if (!meta_in) throw IoError("cannot open '" + meta_path + "' for reading");
  std::vector<std::optional<std::pair<std::string, RowMeta>>> by_row(matrix.rows);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(meta_in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = detail::line_context(meta_path, line_no);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": malformed metadata record: " + e.what());
    }
    if (!rec.is_object() || !rec.contains("row") || !rec["row"].is_number_unsigned() ||
        !rec.contains("id") || !rec["id"].is_string()) {
      throw FormatError(where + ": metadata record needs unsigned 'row' and string 'id'");
    }
    const auto row = rec["row"].get<std::uint64_t>();
    if (row >= matrix.rows) {
      throw ValidationError(where + ": row " + std::to_string(row) + " outside [0, " +
                            std::to_string(matrix.rows) + ")");
    }
    if (by_row[row]) throw ValidationError(where + ": row " + std::to_string(row) + " listed twice");
    RowMeta meta;
    if (rec.contains("uri") && !rec["uri"].is_null()) {
      if (!rec["uri"].is_string()) throw FormatError(where + ": 'uri' must be a string");
      meta.uri = rec["uri"].get<std::string>();
    }
    if (rec.contains("score") && !rec["score"].is_null()) {
      if (!rec["score"].is_number()) throw FormatError(where + ": 'score' must be a number");
      meta.score = rec["score"].get<double>();
    }
    by_row[row] = std::make_pair(rec["id"].get<std::string>(), std::move(meta));
  }
  if (meta_in.bad()) throw IoError("read failure on '" + meta_path + "'");

  EmbeddingTable table(matrix.dim);
  for (std::size_t r = 0; r < matrix.rows; ++r) {
    if (!by_row[r]) {
      throw ValidationError(meta_path + ": no metadata for row " + std::to_string(r));
    }
    auto& [id, meta] = *by_row[r];
    std::vector<double> values(matrix.values.begin() + static_cast<std::ptrdiff_t>(r * matrix.dim),
                               matrix.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * matrix.dim));
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) {
        throw ValidationError(matrix_path + ": non-finite component in id '" + id + "' at index " +
                              std::to_string(i));
      }
    }
    table.add(id, Embedding(std::move(values)), std::move(meta));
  }
  return table;
}

inline std::string encode_pairs(const PreferenceDataset& dataset) {
  std::string out;
  for (const auto& r : dataset.records()) {
    nlohmann::ordered_json rec;
    rec["winner"] = dataset.table().id(r.winner);
    rec["loser"] = dataset.table().id(r.loser);
    if (r.query_id) rec["query_id"] = *r.query_id;
    out += rec.dump();
    out += '\n';
  }
  return out;
}

inline void save_pairs(const PreferenceDataset& dataset, const std::string& path) {
  detail::write_file(path, encode_pairs(dataset));
}

// Tie records are dropped and counted; every other record must resolve.
inline PreferenceDataset load_pairs(const std::string& path, TablePtr table) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  PreferenceDataset dataset(std::move(table));
  const auto& tbl = dataset.table();
  std::size_t ties = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = detail::line_context(path, line_no);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": malformed pair record: " + e.what());
    }
    if (!rec.is_object()) throw FormatError(where + ": pair record must be an object");
    if (rec.contains("tie")) {
      if (!rec["tie"].is_boolean()) throw FormatError(where + ": 'tie' must be a boolean");
      if (rec["tie"].get<bool>()) {
        ++ties;
        continue;
      }
    }
    for (const char* field : {"winner", "loser"}) {
      if (!rec.contains(field) || !rec[field].is_string()) {
        throw FormatError(where + ": missing string field '" + field + "'");
      }
    }
    const auto winner = rec["winner"].get<std::string>();
    const auto loser = rec["loser"].get<std::string>();
    PairRecord record;
    for (const auto& [id, slot] : {std::pair{&winner, &record.winner}, std::pair{&loser, &record.loser}}) {
      auto found = tbl.find(*id);
      if (!found) throw ValidationError(where + ": unknown id '" + *id + "'");
      *slot = *found;
    }
    if (record.winner == record.loser) {
      throw ValidationError(where + ": self-pair on id '" + winner + "'");
    }
    if (rec.contains("query_id") && !rec["query_id"].is_null()) {
      if (!rec["query_id"].is_string()) throw FormatError(where + ": 'query_id' must be a string");
      record.query_id = rec["query_id"].get<std::string>();
    }
    dataset.add(std::move(record));
  }
  if (in.bad()) throw IoError("read failure on '" + path + "'");
  dataset.set_ties_dropped(ties);
  return dataset;
}

struct Split {
  PreferenceDataset train;
  PreferenceDataset eval;
};

// Uniform sample of n_train pairs (without replacement) for training; the
// rest is the evaluation set. Both halves keep the dataset's original order.
inline Split split(const PreferenceDataset& dataset, std::size_t n_train, std::uint64_t seed) {
  if (n_train > dataset.size()) {
    throw ValidationError("n_train " + std::to_string(n_train) + " exceeds dataset size " +
                          std::to_string(dataset.size()));
  }
  Rng rng(seed);
  std::vector<bool> chosen(dataset.size(), false);
  for (std::size_t i : sample_without_replacement(dataset.size(), n_train, rng)) chosen[i] = true;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> eval_idx;
  for (std::size_t i = 0; i < dataset.size(); ++i) (chosen[i] ? train_idx : eval_idx).push_back(i);
  return {dataset.subset(train_idx), dataset.subset(eval_idx)};
}

namespace detail {

inline std::size_t band_size(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

}  // namespace detail

// Winners come from the top high_quantile of rows by score, losers from the
// bottom low_quantile. Rows tied with the first row outside a band are
// excluded from it, so every winner scores strictly above every loser.
inline PreferenceDataset pairs_from_scores(TablePtr table, double high_quantile, double low_quantile,
                                           std::size_t n_pairs, std::uint64_t seed) {
  if (!(high_quantile > 0.0 && high_quantile < 1.0) || !(low_quantile > 0.0 && low_quantile < 1.0)) {
    throw ValidationError("quantiles must lie in (0, 1)");
  }
  if (high_quantile + low_quantile > 1.0 + 1e-12) {
    throw ValidationError("high_quantile + low_quantile must not exceed 1");
  }
  const std::size_t n = table->size();
  std::vector<double> scores(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (!table->meta(r).score) throw ValidationError("row '" + table->id(r) + "' has no score");
    scores[r] = *table->meta(r).score;
  }
  std::vector<double> sorted = scores;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t k_high = detail::band_size(high_quantile, n);
  const std::size_t k_low = detail::band_size(low_quantile, n);

  std::vector<std::size_t> high;
  std::vector<std::size_t> low;
  if (k_high > 0 && k_high < n) {
    const double first_out = sorted[n - k_high - 1];
    for (std::size_t r = 0; r < n; ++r) if (scores[r] > first_out) high.push_back(r);
  }
  if (k_low > 0 && k_low < n) {
    const double first_out = sorted[k_low];
    for (std::size_t r = 0; r < n; ++r) if (scores[r] < first_out) low.push_back(r);
  }
  if (high.empty()) throw ValidationError("empty band: no rows in the high-score band");
  if (low.empty()) throw ValidationError("empty band: no rows in the low-score band");

  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick_high(0, high.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_low(0, low.size() - 1);
  PreferenceDataset out(std::move(table));
  for (std::size_t i = 0; i < n_pairs; ++i) {
    const std::size_t w = high[pick_high(rng)];
    const std::size_t l = low[pick_low(rng)];
    out.add(PairRecord{w, l, std::nullopt});
  }
  return out;
}

}  // namespace prefadapt
