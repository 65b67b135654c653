#include "fedsdaf/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "fedsdaf/errors.hpp"

namespace fedsdaf {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

std::string acc_cell(double v) { return std::isnan(v) ? "" : format_double(v); }

double parse_acc(const std::string& cell) {
  return cell.empty() ? std::nan("") : std::stod(cell);
}

}  // namespace

void write_metrics_csv(const std::vector<RoundMetrics>& rows,
                       const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ParseError("cannot open '" + path + "' for writing");
  f << "round,acc_fused,acc_di,acc_dw,loss_ce,loss_di_kl,loss_dw_kl,alpha_t,"
       "down_bytes,up_bytes\n";
  for (const RoundMetrics& r : rows) {
    f << r.round << "," << format_double(r.acc_fused) << ","
      << acc_cell(r.acc_di) << "," << acc_cell(r.acc_dw) << ","
      << format_double(r.loss_ce) << "," << format_double(r.loss_di_kl) << ","
      << format_double(r.loss_dw_kl) << "," << format_double(r.alpha_t) << ","
      << r.down_bytes << "," << r.up_bytes << "\n";
  }
}

std::vector<RoundMetrics> read_metrics_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(f, line))
    throw ParseError(path + ": empty metrics file");
  std::vector<RoundMetrics> out;
  std::size_t line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    // A trailing empty cell is dropped by getline; pad.
    while (cells.size() < 10) cells.push_back("");
    if (cells.size() != 10)
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": wrong column count");
    try {
      RoundMetrics r;
      r.round = std::stoul(cells[0]);
      r.acc_fused = std::stod(cells[1]);
      r.acc_di = parse_acc(cells[2]);
      r.acc_dw = parse_acc(cells[3]);
      r.loss_ce = std::stod(cells[4]);
      r.loss_di_kl = std::stod(cells[5]);
      r.loss_dw_kl = std::stod(cells[6]);
      r.alpha_t = std::stod(cells[7]);
      r.down_bytes = std::stoull(cells[8]);
      r.up_bytes = std::stoull(cells[9]);
      out.push_back(r);
    } catch (const std::invalid_argument&) {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": malformed numeric field");
    } catch (const std::out_of_range&) {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": numeric field out of range");
    }
  }
  return out;
}

}  // namespace fedsdaf
