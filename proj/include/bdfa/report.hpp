#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace bdfa {

// One row of aggregate.csv: top-1 accuracy (fraction) after `flips`
// committed flips, over the n traces of one (network, dataset, mode).
struct AggregateRow {
  std::string network;
  std::string dataset;
  std::string mode;
  std::size_t flips = 0;
  std::size_t n = 0;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
};

inline constexpr char kAggregateHeader[] = "network,dataset,mode,flips,n,mean,min,max";

std::string format_aggregate_csv(const std::vector<AggregateRow>& rows);
void write_aggregate_csv(const std::filesystem::path& path, const std::vector<AggregateRow>& rows);
// Throws FormatError naming the 1-based line of the first malformed row.
std::vector<AggregateRow> parse_aggregate_csv(const std::string& text, const std::string& origin = "aggregate.csv");
std::vector<AggregateRow> read_aggregate_csv(const std::filesystem::path& path);

struct ReportArtifacts {
  std::string svg;
  std::string markdown;
};

// Accuracy-vs-flips chart (mean line plus min/max band per series) and a
// summary table of accuracy at flip 30 (or the last flip present) with the
// maximum deviation from the mean. Pure function of the rows.
ReportArtifacts render_report(const std::vector<AggregateRow>& rows);

// Reads <trace_dir>/aggregate.csv and writes report.svg and report.md into
// out_dir. Returns the rendered artifacts.
ReportArtifacts write_report(const std::filesystem::path& trace_dir, const std::filesystem::path& out_dir);

}  // namespace bdfa
