#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include "plm/case_model.hpp"

namespace plm::test {

inline std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "' (run tests from the repo root)");
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline NetworkCase load_case(const std::string& path) { return parse_case(read_file(path)); }

}  // namespace plm::test
