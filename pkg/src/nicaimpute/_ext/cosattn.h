#ifndef NICAIMPUTE_COSATTN_H
#define NICAIMPUTE_COSATTN_H

int cosattn_forward(const double *x, double *y, double *z, double *q, double *r,
                    int nb, int n, int d, double scale);

int cosattn_backward(const double *x, const double *y, const double *z, const double *q,
                     const double *r, const double *gy, double *gx,
                     int nb, int n, int d, double scale);

#endif
