#pragma once

#include <string>
#include <vector>

namespace koopkal {

struct SelftestOptions {
    uint64_t seed = 0;
    // test hook: flips the sign of the noise term in the covariance
    // equivalence suite, which must make that row fail
    bool corrupt_joseph = false;
};

struct SelftestRow {
    std::string name;
    bool pass = false;
    double worst = 0.0;       // suite-specific worst-case statistic
    double threshold = 0.0;
    double seconds = 0.0;
};

struct SelftestReport {
    std::vector<SelftestRow> rows;
    bool all_pass = true;
};

SelftestReport run_selftest(const SelftestOptions& options = {});

}  // namespace koopkal
