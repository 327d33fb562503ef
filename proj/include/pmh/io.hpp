#pragma once

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "psd.hpp"

namespace pmh {

using json = nlohmann::json;

struct CsvTable {
    std::vector<std::string> header;
    Mat values;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        out.push_back(cell);
    }
    return out;
}

// Header row followed by numeric rows.
inline CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::InvalidInput, "cannot open " + path);
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) fail(ErrorKind::InvalidInput, "empty csv " + path);
    t.header = split_csv_line(line);
    std::vector<std::vector<double>> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto cells = split_csv_line(line);
        if (cells.size() != t.header.size())
            fail(ErrorKind::InvalidInput, path + ":" + std::to_string(lineno) + ": wrong column count");
        std::vector<double> row;
        row.reserve(cells.size());
        for (auto& c : cells) {
            try {
                std::size_t pos = 0;
                row.push_back(std::stod(c, &pos));
                if (pos != c.size()) throw std::invalid_argument(c);
            } catch (const std::exception&) {
                fail(ErrorKind::InvalidInput, path + ":" + std::to_string(lineno) + ": bad number '" + c + "'");
            }
        }
        rows.push_back(std::move(row));
    }
    t.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.header.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j) t.values(i, j) = rows[i][j];
    return t;
}

struct StringTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline StringTable read_csv_strings(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::InvalidInput, "cannot open " + path);
    StringTable t;
    std::string line;
    if (!std::getline(in, line)) fail(ErrorKind::InvalidInput, "empty csv " + path);
    t.header = split_csv_line(line);
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        auto cells = split_csv_line(line);
        if (cells.size() != t.header.size()) fail(ErrorKind::InvalidInput, path + ": wrong column count");
        t.rows.push_back(std::move(cells));
    }
    return t;
}

inline void write_csv_strings(const std::string& path, const StringTable& t) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::InvalidInput, "cannot write " + path);
    for (std::size_t j = 0; j < t.header.size(); ++j) out << (j ? "," : "") << t.header[j];
    out << "\n";
    for (const auto& r : t.rows) {
        for (std::size_t j = 0; j < r.size(); ++j) out << (j ? "," : "") << r[j];
        out << "\n";
    }
}

inline std::string format_double(double x) {
    std::ostringstream os;
    os << std::setprecision(17) << x;
    return os.str();
}

inline void write_csv(const std::string& path, const std::vector<std::string>& header, const Mat& values) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::InvalidInput, "cannot write " + path);
    for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
    out << "\n";
    for (Eigen::Index i = 0; i < values.rows(); ++i) {
        for (Eigen::Index j = 0; j < values.cols(); ++j) out << (j ? "," : "") << format_double(values(i, j));
        out << "\n";
    }
}

inline std::vector<std::string> default_header(Eigen::Index cols, const std::string& prefix = "x") {
    std::vector<std::string> h;
    for (Eigen::Index j = 0; j < cols; ++j) h.push_back(prefix + std::to_string(j));
    return h;
}

inline json matrix_to_json(const Mat& m) {
    json j;
    j["rows"] = m.rows();
    j["cols"] = m.cols();
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index k = 0; k < m.cols(); ++k) flat.push_back(m(i, k));
    j["entries"] = flat;
    return j;
}

inline Mat matrix_from_json(const json& j) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto flat = j.at("entries").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(flat.size()) != rows * cols)
        fail(ErrorKind::InvalidInput, "matrix entries length does not match rows*cols");
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = flat[static_cast<std::size_t>(i * cols + k)];
    return m;
}

// Square PSD matrix file: {"dim": d, "entries": [row-major d*d values]}
inline json psd_to_json(const PsdMatrix& m) {
    json j;
    j["dim"] = m.dim();
    std::vector<double> flat;
    for (int i = 0; i < m.dim(); ++i)
        for (int k = 0; k < m.dim(); ++k) flat.push_back(m(i, k));
    j["entries"] = flat;
    return j;
}

inline PsdMatrix psd_from_json(const json& j) {
    const int d = j.at("dim").get<int>();
    const auto flat = j.at("entries").get<std::vector<double>>();
    if (d <= 0 || flat.size() != static_cast<std::size_t>(d) * static_cast<std::size_t>(d))
        fail(ErrorKind::InvalidInput, "matrix file: entries length must be dim*dim");
    Mat m(d, d);
    for (int i = 0; i < d; ++i)
        for (int k = 0; k < d; ++k) m(i, k) = flat[static_cast<std::size_t>(i * d + k)];
    return PsdMatrix(m);
}

inline json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::InvalidInput, "cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        fail(ErrorKind::InvalidInput, path + ": " + e.what());
    }
}

inline void write_json(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::InvalidInput, "cannot write " + path);
    out << j.dump(2) << "\n";
}

}  // namespace pmh
