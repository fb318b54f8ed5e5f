#pragma once

#include <string>
#include <vector>

namespace gradtrace {

// One instruction-tuning instance: a query token sequence and the response
// token sequence the model is trained to complete.
struct Example {
    std::string id;
    std::string task;
    std::vector<int> query;
    std::vector<int> response;
};

} // namespace gradtrace
