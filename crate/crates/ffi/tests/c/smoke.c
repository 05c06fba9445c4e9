#include <math.h>
#include <stdio.h>
#include <string.h>

#include "pcrl.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke <out_dir>\n");
        return 2;
    }
    double a[4] = {1.0, 0.0, 1.0, 0.0};
    double loss = -1.0;
    PcrlStatus st = pcrl_info_nce(a, a, 2, 2, 1.0, 0.5, 0.5, PCRL_DENOMINATOR_STANDARD, &loss);
    if (st != PCRL_STATUS_OK || fabs(loss - log(2.0)) > 1e-9) {
        fprintf(stderr, "info_nce: %d %f\n", st, loss);
        return 1;
    }
    if (pcrl_dataset_generate(10, 1, NULL) != PCRL_STATUS_NULL_ARGUMENT || pcrl_last_error() == NULL) {
        fprintf(stderr, "null argument not reported\n");
        return 1;
    }
    if (pcrl_dataset_generate(12, 1, argv[1]) != PCRL_STATUS_OK) {
        fprintf(stderr, "generate: %s\n", pcrl_last_error());
        return 1;
    }
    PcrlDataset *ds = NULL;
    size_t n = 0;
    if (pcrl_dataset_open(argv[1], &ds) != PCRL_STATUS_OK || pcrl_dataset_split_len(ds, 0, &n) != PCRL_STATUS_OK) {
        fprintf(stderr, "open: %s\n", pcrl_last_error());
        return 1;
    }
    pcrl_dataset_free(ds);
    printf("%s %zu\n", pcrl_version(), n);
    return 0;
}
