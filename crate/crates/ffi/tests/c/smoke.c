#include <math.h>
#include <stdio.h>
#include <string.h>

#include "resq.h"

#define CHECK(expr)                                                          \
    do {                                                                     \
        ResqStatus s_ = (expr);                                              \
        if (s_ != RESQ_STATUS_OK) {                                          \
            const char *e_ = resq_last_error();                              \
            fprintf(stderr, "%s -> %d: %s\n", #expr, (int)s_, e_ ? e_ : ""); \
            return 1;                                                        \
        }                                                                    \
    } while (0)

int main(int argc, char **argv) {
    const char *cfg = "n_layer = 1\nn_head = 2\nd_model = 8\ncontext_len = 4\nvocab_size = 7\n";
    ResqModel *m = NULL;
    CHECK(resq_model_new(cfg, 11, &m));

    uint32_t toks[3] = {1, 2, 3};
    uint32_t next[3] = {2, 3, 4};
    float logits[3 * 7];
    CHECK(resq_model_forward(m, toks, 3, logits, 3 * 7));
    double loss = 0.0;
    CHECK(resq_model_loss(m, toks, next, 3, &loss));
    if (!(fabs(loss - log(7.0)) < 0.5)) {
        fprintf(stderr, "loss %f far from ln 7\n", loss);
        return 1;
    }

    uint32_t bad[1] = {7};
    if (resq_model_forward(m, bad, 1, logits, 7) != RESQ_STATUS_INVALID_ARGUMENT || resq_last_error() == NULL) {
        fprintf(stderr, "out-of-range token accepted\n");
        return 1;
    }

    if (argc > 1) {
        CHECK(resq_model_save(m, argv[1]));
        ResqModel *m2 = NULL;
        CHECK(resq_model_load(argv[1], &m2));
        float again[3 * 7];
        CHECK(resq_model_forward(m2, toks, 3, again, 3 * 7));
        if (memcmp(logits, again, sizeof logits) != 0) {
            fprintf(stderr, "reloaded model differs\n");
            return 1;
        }
        resq_model_free(m2);
    }

    ResqParamCount c;
    CHECK(resq_model_param_count(m, &c));
    ResqVerifyReport r;
    CHECK(resq_verify(RESQ_SUITE_ABSORPTION, 0, 5, 16, 4, 8, &r));
    double rel = 0.0;
    CHECK(resq_relative_improvement(2.956, 2.915, &rel));
    resq_model_free(m);

    printf("version %s total %llu absorption %s rel %.6f\n", resq_version(), (unsigned long long)c.total,
           r.passed ? "pass" : "fail", rel);
    return r.passed ? 0 : 1;
}
