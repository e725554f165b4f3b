#include "longrec/io.hpp"

#include <charconv>
#include <cstring>
#include <fstream>
#include <string_view>

#include <json.hpp>

#include "longrec/errors.hpp"

namespace longrec {
namespace {

using json = nlohmann::json;

constexpr std::uint32_t kByteOrderTag = 0x01020304u;

std::string fmt_double(double v) {
  char buf[40];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

void append_double(std::string& out, double v) {
  char buf[40];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  out.append(buf, p);
}

// Line-oriented reader over an in-memory file image. Tracks the byte offset
// of the current line so parse errors can point at the exact spot.
struct TextReader {
  std::string path;
  std::string buf;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  std::size_t line_off = 0;

  bool next(std::string_view* out) {
    if (pos >= buf.size()) return false;
    line_off = pos;
    ++line_no;
    std::size_t end = buf.find('\n', pos);
    if (end == std::string::npos) end = buf.size();
    std::string_view line(buf.data() + pos, end - pos);
    pos = end < buf.size() ? end + 1 : end;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    *out = line;
    return true;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw data_error(path + ":" + std::to_string(line_no) + ": " + msg + " (byte " +
                     std::to_string(line_off) + ")");
  }
};

void split_tabs(std::string_view line, std::vector<std::string_view>& out) {
  out.clear();
  std::size_t start = 0;
  while (true) {
    std::size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      out.push_back(line.substr(start));
      return;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

template <typename T>
T parse_int(std::string_view sv, const TextReader& rd, const char* what) {
  T v{};
  auto [p, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), v);
  if (ec != std::errc() || p != sv.data() + sv.size())
    rd.fail(std::string("bad ") + what + " '" + std::string(sv) + "'");
  return v;
}

double parse_double(std::string_view sv, const TextReader& rd, const char* what) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), v);
  if (ec != std::errc() || p != sv.data() + sv.size())
    rd.fail(std::string("bad ") + what + " '" + std::string(sv) + "'");
  return v;
}

// First line must carry the expected format tag; an optional "# config "
// line follows. Returns with the reader positioned after both.
void read_header(TextReader& rd, const std::string& tag, std::string* config_json,
                 std::string_view* line) {
  if (!rd.next(line)) rd.fail("empty file, expected header '" + tag + "'");
  if (*line != tag) rd.fail("bad header, expected '" + tag + "'");
  if (config_json) config_json->clear();
  if (!rd.next(line)) rd.fail("truncated after header");
  constexpr std::string_view kConfig = "# config ";
  if (line->substr(0, kConfig.size()) == kConfig) {
    if (config_json) *config_json = std::string(line->substr(kConfig.size()));
    if (!rd.next(line)) rd.fail("truncated after config line");
  }
}

TextReader open_text(const std::string& path) {
  TextReader rd;
  rd.path = path;
  rd.buf = read_file(path);
  return rd;
}

std::string schema_to_json(const CatalogSchema& schema) {
  json j;
  j["categorical"] = json::array();
  for (const auto& f : schema.categorical) {
    j["categorical"].push_back({{"name", f.name},
                                {"kind", f.kind == FieldKind::Cross ? "cross" : "id"},
                                {"vocab", f.vocab},
                                {"dim", f.dim},
                                {"per_behavior", f.per_behavior}});
  }
  j["numerical"] = json::array();
  for (const auto& f : schema.numerical)
    j["numerical"].push_back({{"name", f.name}, {"per_behavior", f.per_behavior}});
  return j.dump();
}

CatalogSchema schema_from_json(const std::string& text, const std::string& where) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw data_error(where + ": schema json: " + e.what());
  }
  CatalogSchema schema;
  try {
    for (const auto& f : j.at("categorical")) {
      CategoricalField cf;
      cf.name = f.at("name").get<std::string>();
      std::string kind = f.at("kind").get<std::string>();
      if (kind == "id")
        cf.kind = FieldKind::Id;
      else if (kind == "cross")
        cf.kind = FieldKind::Cross;
      else
        throw data_error(where + ": unknown field kind '" + kind + "'");
      cf.vocab = f.at("vocab").get<std::uint32_t>();
      cf.dim = f.at("dim").get<std::uint32_t>();
      cf.per_behavior = f.at("per_behavior").get<bool>();
      schema.categorical.push_back(std::move(cf));
    }
    for (const auto& f : j.at("numerical")) {
      NumericalField nf;
      nf.name = f.at("name").get<std::string>();
      nf.per_behavior = f.at("per_behavior").get<bool>();
      schema.numerical.push_back(std::move(nf));
    }
  } catch (const json::exception& e) {
    throw data_error(where + ": schema json: " + e.what());
  }
  schema.validate();
  return schema;
}

struct BinWriter {
  std::string out;

  void bytes(const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void doubles(const double* p, std::size_t n) { bytes(p, n * 8); }
  void vec(const Eigen::VectorXd& v) {
    u64(static_cast<std::uint64_t>(v.size()));
    doubles(v.data(), static_cast<std::size_t>(v.size()));
  }
  // Matrices are stored row-major regardless of in-memory layout.
  template <typename M>
  void mat(const M& m) {
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) f64(m(r, c));
  }
};

struct BinReader {
  std::string path;
  std::string buf;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& msg) const {
    throw data_error(path + ": " + msg + " (byte " + std::to_string(pos) + ")");
  }
  void need(std::size_t n) {
    if (buf.size() - pos < n) fail("truncated, need " + std::to_string(n) + " more bytes");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  double f64() {
    need(8);
    double v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string str() {
    std::uint32_t n = u32();
    need(n);
    std::string s(buf.data() + pos, n);
    pos += n;
    return s;
  }
  // Element count read from the stream, validated against remaining bytes
  // before any allocation.
  std::size_t count(const char* what, std::size_t elem_bytes) {
    std::uint64_t n = u64();
    if (n > (buf.size() - pos) / elem_bytes)
      fail(std::string("implausible ") + what + " count " + std::to_string(n));
    return static_cast<std::size_t>(n);
  }
  void doubles(double* p, std::size_t n) {
    need(n * 8);
    std::memcpy(p, buf.data() + pos, n * 8);
    pos += n * 8;
  }
  Eigen::VectorXd vec(std::int64_t expect = -1) {
    std::size_t n = count("vector", 8);
    if (expect >= 0 && n != static_cast<std::size_t>(expect))
      fail("vector length " + std::to_string(n) + ", expected " + std::to_string(expect));
    Eigen::VectorXd v(n);
    doubles(v.data(), n);
    return v;
  }
  template <typename M>
  M mat(std::int64_t er = -1, std::int64_t ec = -1) {
    std::uint64_t r = u64();
    std::uint64_t c = u64();
    if (er >= 0 && r != static_cast<std::uint64_t>(er))
      fail("matrix rows " + std::to_string(r) + ", expected " + std::to_string(er));
    if (ec >= 0 && c != static_cast<std::uint64_t>(ec))
      fail("matrix cols " + std::to_string(c) + ", expected " + std::to_string(ec));
    if (c != 0 && r > (buf.size() - pos) / 8 / c) fail("implausible matrix size");
    M m(r, c);
    for (std::uint64_t i = 0; i < r; ++i)
      for (std::uint64_t j = 0; j < c; ++j) m(i, j) = f64();
    return m;
  }
  void magic(const char tag[4], std::uint32_t version) {
    need(4);
    if (std::memcmp(buf.data() + pos, tag, 4) != 0)
      fail(std::string("bad magic, expected '") + std::string(tag, 4) + "'");
    pos += 4;
    std::uint32_t v = u32();
    if (v != version) fail("unsupported version " + std::to_string(v));
    std::uint32_t order = u32();
    if (order != kByteOrderTag) fail("byte-order mismatch");
  }
  void done() {
    if (pos != buf.size()) fail("trailing bytes after payload");
  }
};

BinReader open_bin(const std::string& path) {
  BinReader rd;
  rd.path = path;
  rd.buf = read_file(path);
  return rd;
}

void write_magic(BinWriter& w, const char tag[4], std::uint32_t version) {
  w.bytes(tag, 4);
  w.u32(version);
  w.u32(kByteOrderTag);
}

}  // namespace

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw data_error("read failed for '" + path + "'");
  return buf;
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot create '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw data_error("write failed for '" + path + "'");
}

void store_catalog(const Catalog& catalog, const std::string& path,
                   const std::string& config_json) {
  std::string out = "# longrec-catalog v1\n";
  if (!config_json.empty()) out += "# config " + config_json + "\n";
  out += "# schema " + schema_to_json(catalog.schema()) + "\n";
  out += "# items " + std::to_string(catalog.size()) + "\n";
  for (std::size_t id = 0; id < catalog.size(); ++id) {
    const ItemFeatures& f = catalog.raw_features(id);
    out += std::to_string(id);
    for (std::uint32_t c : f.categorical) {
      out += '\t';
      out += std::to_string(c);
    }
    for (double v : f.numerical) {
      out += '\t';
      append_double(out, v);
    }
    out += '\n';
  }
  write_file(path, out);
}

Catalog load_catalog(const std::string& path, std::string* config_json) {
  TextReader rd = open_text(path);
  std::string_view line;
  read_header(rd, "# longrec-catalog v1", config_json, &line);

  constexpr std::string_view kSchema = "# schema ";
  if (line.substr(0, kSchema.size()) != kSchema) rd.fail("expected '# schema' line");
  CatalogSchema schema =
      schema_from_json(std::string(line.substr(kSchema.size())), path + ":" + std::to_string(rd.line_no));

  if (!rd.next(&line)) rd.fail("truncated before '# items' line");
  constexpr std::string_view kItems = "# items ";
  if (line.substr(0, kItems.size()) != kItems) rd.fail("expected '# items' line");
  std::uint64_t n_items = parse_int<std::uint64_t>(line.substr(kItems.size()), rd, "item count");

  const std::size_t n_cols = 1 + schema.n_categorical() + schema.n_numerical();
  std::vector<ItemFeatures> items;
  items.reserve(n_items);
  std::vector<std::string_view> cols;
  while (rd.next(&line)) {
    if (line.empty()) continue;
    split_tabs(line, cols);
    if (cols.size() != n_cols)
      rd.fail("expected " + std::to_string(n_cols) + " columns, got " + std::to_string(cols.size()));
    std::uint64_t id = parse_int<std::uint64_t>(cols[0], rd, "item id");
    if (id != items.size())
      rd.fail("item ids must be dense, expected " + std::to_string(items.size()));
    ItemFeatures f;
    for (std::size_t i = 0; i < schema.n_categorical(); ++i) {
      std::uint32_t v = parse_int<std::uint32_t>(cols[1 + i], rd, "category index");
      if (v >= schema.categorical[i].vocab)
        rd.fail("category index " + std::to_string(v) + " out of vocab for field '" +
                schema.categorical[i].name + "'");
      f.categorical.push_back(v);
    }
    for (std::size_t i = 0; i < schema.n_numerical(); ++i)
      f.numerical.push_back(parse_double(cols[1 + schema.n_categorical() + i], rd, "numerical"));
    items.push_back(std::move(f));
  }
  if (items.size() != n_items)
    rd.fail("header declared " + std::to_string(n_items) + " items, file has " +
            std::to_string(items.size()));
  return Catalog(std::move(schema), std::move(items));
}

void store_behaviors(const std::vector<BehaviorSequence>& seqs, const std::string& path,
                     const std::string& config_json) {
  std::uint64_t records = 0;
  for (const auto& s : seqs) records += s.records.size();
  std::string out = "# longrec-behaviors v1\n";
  if (!config_json.empty()) out += "# config " + config_json + "\n";
  out += "# users " + std::to_string(seqs.size()) + " records " + std::to_string(records) + "\n";
  out.reserve(out.size() + records * 32);
  for (const auto& s : seqs) {
    out += "u\t" + std::to_string(s.user_id) + "\t" + std::to_string(s.records.size()) + "\n";
    for (const auto& r : s.records) {
      out += "b\t";
      out += std::to_string(r.item_id);
      out += '\t';
      append_double(out, r.completion_ratio);
      out += '\t';
      out += std::to_string(r.timestamp);
      out += '\n';
    }
  }
  write_file(path, out);
}

std::vector<BehaviorSequence> load_behaviors(const std::string& path, std::string* config_json) {
  TextReader rd = open_text(path);
  std::string_view line;
  read_header(rd, "# longrec-behaviors v1", config_json, &line);
  constexpr std::string_view kUsers = "# users ";
  if (line.substr(0, kUsers.size()) != kUsers) rd.fail("expected '# users' line");

  std::vector<BehaviorSequence> seqs;
  std::vector<std::string_view> cols;
  std::uint64_t pending = 0;  // records still owed to the open user
  while (rd.next(&line)) {
    if (line.empty()) continue;
    split_tabs(line, cols);
    if (cols[0] == "u") {
      if (pending != 0)
        rd.fail("user " + std::to_string(seqs.back().user_id) + " is short " +
                std::to_string(pending) + " records");
      if (cols.size() != 3) rd.fail("user line needs 3 columns");
      BehaviorSequence s;
      s.user_id = parse_int<std::uint64_t>(cols[1], rd, "user id");
      pending = parse_int<std::uint64_t>(cols[2], rd, "record count");
      s.records.reserve(pending);
      seqs.push_back(std::move(s));
    } else if (cols[0] == "b") {
      if (seqs.empty()) rd.fail("behavior row before any user line");
      if (pending == 0) rd.fail("more behavior rows than the user line declared");
      if (cols.size() != 4) rd.fail("behavior line needs 4 columns");
      BehaviorRecord r;
      r.item_id = parse_int<std::uint64_t>(cols[1], rd, "item id");
      r.completion_ratio = clamp_completion(parse_double(cols[2], rd, "completion ratio"));
      r.timestamp = parse_int<std::int64_t>(cols[3], rd, "timestamp");
      auto& recs = seqs.back().records;
      if (!recs.empty() && r.timestamp < recs.back().timestamp)
        rd.fail("timestamps must be ascending per user");
      recs.push_back(r);
      --pending;
    } else {
      rd.fail("unknown row tag '" + std::string(cols[0]) + "'");
    }
  }
  if (pending != 0)
    rd.fail("user " + std::to_string(seqs.back().user_id) + " is short " +
            std::to_string(pending) + " records");
  return seqs;
}

void store_impressions(const std::vector<Impression>& imps, const std::string& path,
                       const std::string& config_json) {
  std::string out = "# longrec-impressions v1\n";
  if (!config_json.empty()) out += "# config " + config_json + "\n";
  out += "# count " + std::to_string(imps.size()) + "\n";
  out.reserve(out.size() + imps.size() * 32);
  for (const auto& im : imps) {
    out += std::to_string(im.user_id);
    out += '\t';
    out += std::to_string(im.item_id);
    out += '\t';
    out += std::to_string(im.timestamp);
    out += '\t';
    out += im.label ? '1' : '0';
    out += '\t';
    out += im.is_test ? '1' : '0';
    out += '\n';
  }
  write_file(path, out);
}

std::vector<Impression> load_impressions(const std::string& path, std::string* config_json) {
  TextReader rd = open_text(path);
  std::string_view line;
  read_header(rd, "# longrec-impressions v1", config_json, &line);
  constexpr std::string_view kCount = "# count ";
  if (line.substr(0, kCount.size()) != kCount) rd.fail("expected '# count' line");
  std::uint64_t n = parse_int<std::uint64_t>(line.substr(kCount.size()), rd, "count");

  std::vector<Impression> imps;
  imps.reserve(n);
  std::vector<std::string_view> cols;
  while (rd.next(&line)) {
    if (line.empty()) continue;
    split_tabs(line, cols);
    if (cols.size() != 5) rd.fail("impression line needs 5 columns");
    Impression im;
    im.user_id = parse_int<std::uint64_t>(cols[0], rd, "user id");
    im.item_id = parse_int<std::uint64_t>(cols[1], rd, "item id");
    im.timestamp = parse_int<std::int64_t>(cols[2], rd, "timestamp");
    std::uint32_t label = parse_int<std::uint32_t>(cols[3], rd, "label");
    if (label > 1) rd.fail("label must be 0 or 1");
    im.label = static_cast<std::uint8_t>(label);
    std::uint32_t test = parse_int<std::uint32_t>(cols[4], rd, "is_test");
    if (test > 1) rd.fail("is_test must be 0 or 1");
    im.is_test = test == 1;
    imps.push_back(im);
  }
  if (imps.size() != n)
    rd.fail("header declared " + std::to_string(n) + " impressions, file has " +
            std::to_string(imps.size()));
  return imps;
}

void store_clusters(const ClusterStore& store, const std::string& path) {
  BinWriter w;
  write_magic(w, "LRCS", 1);
  w.str(store.config_json);
  w.u64(store.schema_fingerprint);
  w.u64(store.embed_seed);

  std::uint32_t n_cat = 0, n_num = 0;
  std::uint64_t embed_dim = 0;
  for (const auto& e : store.entries) {
    if (e.items.empty()) continue;
    n_cat = static_cast<std::uint32_t>(e.items[0].categorical.size());
    n_num = static_cast<std::uint32_t>(e.items[0].numerical.size());
    if (!e.hist.clusters.empty()) embed_dim = static_cast<std::uint64_t>(e.hist.clusters[0].centroid.size());
    break;
  }
  w.u32(n_cat);
  w.u32(n_num);
  w.u64(embed_dim);
  w.u64(store.entries.size());
  for (const auto& e : store.entries) {
    if (e.items.size() != e.hist.clusters.size())
      throw data_error("cluster store entry for user " + std::to_string(e.hist.user_id) +
                       " has " + std::to_string(e.items.size()) + " virtual items for " +
                       std::to_string(e.hist.clusters.size()) + " clusters");
    w.u64(e.hist.user_id);
    w.u64(e.hist.source_length);
    w.u64(e.hist.clusters.size());
    for (std::size_t c = 0; c < e.hist.clusters.size(); ++c) {
      const Cluster& cl = e.hist.clusters[c];
      const VirtualItem& vi = e.items[c];
      if (cl.member_rows.size() != cl.member_ids.size())
        throw data_error("cluster store entry for user " + std::to_string(e.hist.user_id) +
                         " has mismatched member id/row lists");
      w.u32(cl.group_id);
      w.u64(cl.member_ids.size());
      for (ItemId id : cl.member_ids) w.u64(id);
      for (std::int64_t row : cl.member_rows) w.u64(static_cast<std::uint64_t>(row));
      w.doubles(cl.centroid.data(), static_cast<std::size_t>(cl.centroid.size()));
      w.u64(vi.source_item_id);
      for (std::uint32_t v : vi.categorical) w.u32(v);
      w.doubles(vi.numerical.data(), static_cast<std::size_t>(vi.numerical.size()));
    }
  }
  write_file(path, w.out);
}

ClusterStore load_clusters(const std::string& path) {
  BinReader rd = open_bin(path);
  rd.magic("LRCS", 1);
  ClusterStore store;
  store.config_json = rd.str();
  store.schema_fingerprint = rd.u64();
  store.embed_seed = rd.u64();
  const std::uint32_t n_cat = rd.u32();
  const std::uint32_t n_num = rd.u32();
  const std::uint64_t embed_dim = rd.u64();
  const std::size_t n_entries = rd.count("entry", 8);
  store.entries.reserve(n_entries);
  for (std::size_t e = 0; e < n_entries; ++e) {
    ClusterStoreEntry entry;
    entry.hist.user_id = rd.u64();
    entry.hist.source_length = rd.u64();
    const std::size_t n_clusters = rd.count("cluster", 8);
    entry.hist.clusters.reserve(n_clusters);
    entry.items.reserve(n_clusters);
    std::uint64_t covered = 0;
    for (std::size_t c = 0; c < n_clusters; ++c) {
      Cluster cl;
      cl.group_id = rd.u32();
      if (cl.group_id < 1) rd.fail("cluster group_id must be >= 1");
      const std::size_t n_members = rd.count("member", 8);
      if (n_members == 0) rd.fail("empty cluster");
      cl.member_ids.reserve(n_members);
      for (std::size_t m = 0; m < n_members; ++m) cl.member_ids.push_back(rd.u64());
      cl.member_rows.reserve(n_members);
      for (std::size_t m = 0; m < n_members; ++m) {
        auto row = static_cast<std::int64_t>(rd.u64());
        if (row < 0 || static_cast<std::uint64_t>(row) >= entry.hist.source_length)
          rd.fail("member row " + std::to_string(row) + " outside the source sequence");
        cl.member_rows.push_back(row);
      }
      covered += n_members;
      cl.centroid.resize(static_cast<Eigen::Index>(embed_dim));
      rd.doubles(cl.centroid.data(), embed_dim);
      VirtualItem vi;
      vi.source_item_id = rd.u64();
      vi.categorical.reserve(n_cat);
      for (std::uint32_t i = 0; i < n_cat; ++i) vi.categorical.push_back(rd.u32());
      vi.numerical.resize(n_num);
      rd.doubles(vi.numerical.data(), n_num);
      entry.hist.clusters.push_back(std::move(cl));
      entry.items.push_back(std::move(vi));
    }
    if (covered != entry.hist.source_length)
      rd.fail("user " + std::to_string(entry.hist.user_id) + " covers " +
              std::to_string(covered) + " of " + std::to_string(entry.hist.source_length) +
              " behaviors");
    store.entries.push_back(std::move(entry));
  }
  rd.done();
  return store;
}

void store_model(const CtrModel& model, const std::string& path, const std::string& config_json) {
  BinWriter w;
  write_magic(w, "LRMD", 1);
  w.str(config_json);
  w.str(schema_to_json(model.schema));
  w.u64(model.schema.fingerprint());

  const ModelConfig& c = model.cfg;
  w.u32(static_cast<std::uint32_t>(c.d_k));
  w.u32(static_cast<std::uint32_t>(c.d_v));
  w.u32(static_cast<std::uint32_t>(c.d_out));
  w.u32(static_cast<std::uint32_t>(c.d_user));
  w.u32(static_cast<std::uint32_t>(c.n_heads));
  w.u32(static_cast<std::uint32_t>(c.gsu_k));
  w.u32(static_cast<std::uint32_t>(c.recent_len));
  w.u32(static_cast<std::uint32_t>(c.mlp_widths.size()));
  for (int width : c.mlp_widths) w.u32(static_cast<std::uint32_t>(width));
  w.u32(static_cast<std::uint32_t>(c.variant));
  w.u32((c.reweight_gsu ? 1u : 0u) | (c.reweight_esu ? 2u : 0u));
  w.u64(c.init_seed);

  w.u32(static_cast<std::uint32_t>(model.tables.fields.size()));
  for (const auto& f : model.tables.fields) w.mat(f);
  w.mat(model.user_table);
  w.u32(static_cast<std::uint32_t>(model.attn.heads.size()));
  for (const auto& h : model.attn.heads) {
    w.mat(h.w_q);
    w.mat(h.w_h);
    w.mat(h.w_c);
    w.vec(h.beta);
    w.mat(h.w_v);
  }
  w.mat(model.attn.w_o);
  w.u32(static_cast<std::uint32_t>(model.mlp.weights.size()));
  for (std::size_t l = 0; l < model.mlp.weights.size(); ++l) {
    w.mat(model.mlp.weights[l]);
    w.vec(model.mlp.biases[l]);
  }
  write_file(path, w.out);
}

CtrModel load_model(const std::string& path, std::string* config_json) {
  BinReader rd = open_bin(path);
  rd.magic("LRMD", 1);
  std::string config = rd.str();
  if (config_json) *config_json = config;
  CtrModel model;
  model.schema = schema_from_json(rd.str(), path);
  const std::uint64_t fp = rd.u64();
  if (fp != model.schema.fingerprint()) rd.fail("schema fingerprint mismatch");

  ModelConfig c;
  c.d_k = static_cast<int>(rd.u32());
  c.d_v = static_cast<int>(rd.u32());
  c.d_out = static_cast<int>(rd.u32());
  c.d_user = static_cast<int>(rd.u32());
  c.n_heads = static_cast<int>(rd.u32());
  c.gsu_k = static_cast<int>(rd.u32());
  c.recent_len = static_cast<int>(rd.u32());
  const std::uint32_t n_mlp = rd.u32();
  if (n_mlp > 64) rd.fail("implausible mlp depth");
  c.mlp_widths.clear();
  for (std::uint32_t i = 0; i < n_mlp; ++i) c.mlp_widths.push_back(static_cast<int>(rd.u32()));
  const std::uint32_t variant = rd.u32();
  if (variant > 2) rd.fail("unknown model variant " + std::to_string(variant));
  c.variant = static_cast<ModelVariant>(variant);
  const std::uint32_t flags = rd.u32();
  c.reweight_gsu = (flags & 1u) != 0;
  c.reweight_esu = (flags & 2u) != 0;
  c.init_seed = rd.u64();
  c.validate();
  model.cfg = c;

  const auto h_dim = static_cast<std::int64_t>(model.schema.inherent_dim());
  const auto n_cross = static_cast<std::int64_t>(model.schema.cross_count());
  const std::uint32_t n_fields = rd.u32();
  if (n_fields != model.schema.n_categorical()) rd.fail("embedding field count mismatch");
  model.tables.fields.reserve(n_fields);
  for (std::uint32_t i = 0; i < n_fields; ++i) {
    const auto& f = model.schema.categorical[i];
    model.tables.fields.push_back(rd.mat<RowMatrixXd>(f.vocab, f.dim));
  }
  model.user_table = rd.mat<RowMatrixXd>(-1, c.d_user);

  const std::uint32_t n_heads = rd.u32();
  if (n_heads != static_cast<std::uint32_t>(c.n_heads)) rd.fail("head count mismatch");
  model.attn.d_k = c.d_k;
  model.attn.d_v = c.d_v;
  model.attn.heads.reserve(n_heads);
  for (std::uint32_t h = 0; h < n_heads; ++h) {
    HeadParams head;
    head.w_q = rd.mat<Eigen::MatrixXd>(h_dim, c.d_k);
    head.w_h = rd.mat<Eigen::MatrixXd>(h_dim, c.d_k);
    head.w_c = rd.mat<Eigen::MatrixXd>(kCrossFieldDim, n_cross);
    head.beta = rd.vec(n_cross);
    head.w_v = rd.mat<Eigen::MatrixXd>(h_dim + kCrossFieldDim * n_cross, c.d_v);
    model.attn.heads.push_back(std::move(head));
  }
  model.attn.w_o = rd.mat<Eigen::MatrixXd>(static_cast<std::int64_t>(c.n_heads) * c.d_v, c.d_out);

  const std::uint32_t n_layers = rd.u32();
  if (n_layers != c.mlp_widths.size() + 1) rd.fail("mlp layer count mismatch");
  std::int64_t in_dim = -1;  // first layer rows validated against mlp_input_dim below
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    const std::int64_t out_dim =
        l < c.mlp_widths.size() ? c.mlp_widths[l] : 1;
    model.mlp.weights.push_back(rd.mat<Eigen::MatrixXd>(in_dim, out_dim));
    model.mlp.biases.push_back(rd.vec(out_dim));
    in_dim = out_dim;
  }
  if (model.mlp.weights[0].rows() != model.mlp_input_dim()) rd.fail("mlp input width mismatch");
  rd.done();
  return model;
}

}  // namespace longrec
