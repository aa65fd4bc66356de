#include <stdio.h>
#include <string.h>
#include "argus.h"

int main(void) {
    ArgusRun *run = NULL;
    if (argus_run_new("{\"problem\": \"quadratic\", \"seed\": 1, \"T\": 5}", &run) != ARGUS_STATUS_OK) {
        fprintf(stderr, "new: %s\n", argus_last_error());
        return 1;
    }
    ArgusMetrics m;
    while (argus_run_step(run, &m) == ARGUS_STATUS_OK) {
    }
    if (m.t != 5 || argus_run_iteration(run) != 5) {
        return 2;
    }
    argus_run_free(run);

    double v[3] = {2.0, -0.5, -3.0};
    argus_prox_l1(v, 3, 1.0, v);
    if (v[0] != 1.0 || v[1] != 0.0 || v[2] != -2.0) {
        return 3;
    }
    if (argus_run_new("{\"problem\": \"quadratic\", \"p_c\": 2}", &run) != ARGUS_STATUS_CONFIG_ERROR || run != NULL) {
        return 4;
    }
    if (strstr(argus_last_error(), "p_c") == NULL) {
        return 5;
    }
    printf("ok\n");
    return 0;
}
