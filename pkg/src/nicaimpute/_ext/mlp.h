#ifndef NICAIMPUTE_MLP_H
#define NICAIMPUTE_MLP_H

int mlp_forward(const double *c, const double *w1, const double *b1, const double *w2,
                const double *b2, const double *keep, const double *rows,
                double *act, double *out, int m, int din, int hid, int dout);

int mlp_backward(const double *c, const double *w1, const double *w2, const double *act,
                 const double *keep, const double *rows, const double *gout,
                 double *gc, double *gw1, double *gb1, double *gw2, double *gb2,
                 int m, int din, int hid, int dout);

#endif
