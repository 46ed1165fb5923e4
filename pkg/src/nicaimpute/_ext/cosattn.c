/*
 * Fused cosine self-attention kernels.
 *
 * Layout: x, y, q, gy, gx are (nb, n, d) row-major; z and r are (nb, n).
 * Each of the nb blocks attends only within itself.
 *
 *   q_i = x_i / |x_i|        (zero rows stay zero)
 *   e_ij = exp(scale * (q_i . q_j - 1))
 *   z_i = sum_j e_ij,  y_i = sum_j e_ij x_j / z_i
 *
 * Shifting by the known maximum score (scale) instead of the row max makes
 * e symmetric, so every unordered pair is visited once and its exponential
 * is shared by both rows. The backward pass recomputes e instead of storing
 * an n x n matrix.
 *
 * Rows are processed RB at a time against column tiles of VL lanes. Column
 * arrays are stored transposed (d x np, np = n rounded up to VL) and 64-byte
 * aligned so every tile load is aligned.
 */
#include "cosattn.h"

#include <math.h>
#include <stdlib.h>
#include <string.h>

#define RB 4
#define VL 8

typedef double v8d __attribute__((vector_size(VL * sizeof(double))));

static double *alloc_aligned(size_t count)
{
    size_t bytes = ((count * sizeof(double) + 63) / 64) * 64;
    if (bytes == 0) bytes = 64;
    return aligned_alloc(64, bytes);
}

typedef struct {
    int n, np, d;
    double *qt, *xt, *ut, *w;     /* transposed, zero padded */
    double *acc_a, *acc_b;        /* transposed accumulators */
    double *e, *t;                /* RB x np pair buffers */
    double *rows;                 /* RB x 3d: q, x, u of the current row block */
} scratch_t;

static void scratch_free(scratch_t *s)
{
    free(s->qt); free(s->xt); free(s->ut); free(s->w);
    free(s->acc_a); free(s->acc_b); free(s->e); free(s->t); free(s->rows);
}

static int scratch_alloc(scratch_t *s, int n, int d)
{
    memset(s, 0, sizeof(*s));
    s->n = n;
    s->d = d;
    s->np = ((n + VL - 1) / VL) * VL;
    const size_t nd = (size_t)s->np * d;
    s->qt = alloc_aligned(nd);
    s->xt = alloc_aligned(nd);
    s->ut = alloc_aligned(nd);
    s->w = alloc_aligned(s->np);
    s->acc_a = alloc_aligned(nd);
    s->acc_b = alloc_aligned(nd);
    s->e = alloc_aligned((size_t)RB * s->np);
    s->t = alloc_aligned((size_t)RB * s->np);
    s->rows = alloc_aligned((size_t)RB * 3 * d);
    if (!(s->qt && s->xt && s->ut && s->w && s->acc_a && s->acc_b && s->e && s->t && s->rows)) {
        scratch_free(s);
        return -1;
    }
    return 0;
}

static void transpose_pad(const double *src, double *dst, int n, int np, int d)
{
    for (int k = 0; k < d; k++) {
        double *row = dst + (size_t)k * np;
        for (int i = 0; i < n; i++) row[i] = src[(size_t)i * d + k];
        for (int i = n; i < np; i++) row[i] = 0.0;
    }
}

static void unit_rows(const double *x, double *q, double *r, int n, int d)
{
    for (int i = 0; i < n; i++) {
        double s = 0.0;
        for (int k = 0; k < d; k++) s += x[(size_t)i * d + k] * x[(size_t)i * d + k];
        const double nr = sqrt(s);
        const double inv = nr > 0.0 ? 1.0 / nr : 0.0;
        r[i] = nr;
        for (int k = 0; k < d; k++) q[(size_t)i * d + k] = x[(size_t)i * d + k] * inv;
    }
}

/* Copy row i0+r of src (or zeros past the end) into dst[r*stride + off + k]. */
static void load_rows(const double *src, double *dst, int i0, int n, int d, int stride, int off)
{
    for (int r = 0; r < RB; r++)
        for (int k = 0; k < d; k++)
            dst[r * stride + off + k] = (i0 + r < n) ? src[(size_t)(i0 + r) * d + k] : 0.0;
}

/*
 * Exponentiate e[r][j0:np] in place, then zero every lane that is not a
 * strictly-upper pair (j <= i0+r) or lies in the padding (j >= n).
 */
static void exp_and_mask(scratch_t *s, int i0, int j0, double scale)
{
    const int np = s->np, n = s->n;
    for (int r = 0; r < RB; r++) {
        double *er = s->e + (size_t)r * np;
        #pragma omp simd
        for (int j = j0; j < np; j++) er[j] = exp(scale * er[j]);
        int lim = i0 + r + 1;
        if (lim > np || i0 + r >= n) lim = np;
        for (int j = j0; j < lim; j++) er[j] = 0.0;
        for (int j = n; j < np; j++) er[j] = 0.0;
    }
}

int cosattn_forward(const double *x, double *y, double *z, double *q, double *r,
                    int nb, int n, int d, double scale)
{
    scratch_t s;
    if (scratch_alloc(&s, n, d) != 0) return -1;
    const int np = s.np, stride = 3 * d;
    double *restrict numt = s.acc_a;
    double *restrict zacc = s.w;
    double *restrict e0 = s.e, *restrict e1 = s.e + np, *restrict e2 = s.e + 2 * np, *restrict e3 = s.e + 3 * np;
    double *restrict rq = s.rows, *restrict rx = s.rows + d;   /* row r at rq + r*stride */
    for (int b = 0; b < nb; b++) {
        const double *xb = x + (size_t)b * n * d;
        double *yb = y + (size_t)b * n * d;
        double *qb = q + (size_t)b * n * d;
        double *zb = z + (size_t)b * n;
        unit_rows(xb, qb, r + (size_t)b * n, n, d);
        transpose_pad(qb, s.qt, n, np, d);
        transpose_pad(xb, s.xt, n, np, d);
        memset(numt, 0, sizeof(double) * np * d);
        memset(zacc, 0, sizeof(double) * np);
        for (int i0 = 0; i0 < n; i0 += RB) {
            const int j0 = i0 - i0 % VL;
            load_rows(qb, s.rows, i0, n, d, stride, 0);
            load_rows(xb, s.rows, i0, n, d, stride, d);
            /* scores: e[r][j] = q_r . q_j - 1 */
            for (int jc = j0; jc < np; jc += VL) {
                v8d s0 = {0}, s1 = {0}, s2 = {0}, s3 = {0};
                s0 -= 1.0; s1 -= 1.0; s2 -= 1.0; s3 -= 1.0;
                for (int k = 0; k < d; k++) {
                    const v8d qv = *(const v8d *)(s.qt + (size_t)k * np + jc);
                    s0 += rq[k] * qv;
                    s1 += rq[stride + k] * qv;
                    s2 += rq[2 * stride + k] * qv;
                    s3 += rq[3 * stride + k] * qv;
                }
                *(v8d *)(e0 + jc) = s0;
                *(v8d *)(e1 + jc) = s1;
                *(v8d *)(e2 + jc) = s2;
                *(v8d *)(e3 + jc) = s3;
            }
            exp_and_mask(&s, i0, j0, scale);
            /* diagonal pairs contribute to their own row only */
            for (int rr = 0; rr < RB && i0 + rr < n; rr++) {
                const double *qi = rq + rr * stride, *xi = rx + rr * stride;
                double ss = 0.0;
                for (int k = 0; k < d; k++) ss += qi[k] * qi[k];
                const double ed = exp(scale * (ss - 1.0));
                zacc[i0 + rr] += ed;
                for (int k = 0; k < d; k++) numt[(size_t)k * np + i0 + rr] += ed * xi[k];
            }
            double z0 = 0.0, z1 = 0.0, z2 = 0.0, z3 = 0.0;
            #pragma omp simd reduction(+:z0, z1, z2, z3)
            for (int j = j0; j < np; j++) {
                z0 += e0[j]; z1 += e1[j]; z2 += e2[j]; z3 += e3[j];
                zacc[j] += e0[j] + e1[j] + e2[j] + e3[j];
            }
            const double zs[RB] = {z0, z1, z2, z3};
            for (int rr = 0; rr < RB && i0 + rr < n; rr++) zacc[i0 + rr] += zs[rr];
            for (int k = 0; k < d; k++) {
                const double *restrict xk = s.xt + (size_t)k * np;
                double *restrict nk = numt + (size_t)k * np;
                const double x0 = rx[k], x1 = rx[stride + k], x2 = rx[2 * stride + k], x3 = rx[3 * stride + k];
                double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                #pragma omp simd reduction(+:a0, a1, a2, a3)
                for (int j = j0; j < np; j++) {
                    const double xv = xk[j];
                    a0 += e0[j] * xv; a1 += e1[j] * xv; a2 += e2[j] * xv; a3 += e3[j] * xv;
                    nk[j] += e0[j] * x0 + e1[j] * x1 + e2[j] * x2 + e3[j] * x3;
                }
                const double as[RB] = {a0, a1, a2, a3};
                for (int rr = 0; rr < RB && i0 + rr < n; rr++) nk[i0 + rr] += as[rr];
            }
        }
        for (int i = 0; i < n; i++) {
            zb[i] = zacc[i];
            const double inv = 1.0 / zacc[i];
            for (int k = 0; k < d; k++) yb[(size_t)i * d + k] = numt[(size_t)k * np + i] * inv;
        }
    }
    scratch_free(&s);
    return 0;
}

int cosattn_backward(const double *x, const double *y, const double *z, const double *q,
                     const double *r, const double *gy, double *gx,
                     int nb, int n, int d, double scale)
{
    scratch_t s;
    if (scratch_alloc(&s, n, d) != 0) return -1;
    const int np = s.np, stride = 3 * d;
    double *restrict gqt = s.acc_a;   /* d loss / d q, transposed */
    double *restrict gvt = s.acc_b;   /* value-path gradient, transposed */
    double *restrict w = s.w;
    double *restrict e0 = s.e, *restrict e1 = s.e + np, *restrict e2 = s.e + 2 * np, *restrict e3 = s.e + 3 * np;
    double *restrict t0 = s.t, *restrict t1 = s.t + np, *restrict t2 = s.t + 2 * np, *restrict t3 = s.t + 3 * np;
    double *restrict rq = s.rows, *restrict rx = s.rows + d, *restrict ru = s.rows + 2 * d;
    double *ub = malloc(sizeof(double) * ((size_t)n * d + 1));
    if (!ub) { scratch_free(&s); return -1; }
    for (int b = 0; b < nb; b++) {
        const double *xb = x + (size_t)b * n * d;
        const double *yb = y + (size_t)b * n * d;
        const double *zb = z + (size_t)b * n;
        const double *qb = q + (size_t)b * n * d;
        const double *rb = r + (size_t)b * n;
        const double *gyb = gy + (size_t)b * n * d;
        double *gxb = gx + (size_t)b * n * d;
        /* u_i = gy_i / z_i,  w_i = (gy_i . y_i) / z_i */
        for (int i = 0; i < n; i++) {
            const double inv = 1.0 / zb[i];
            double c = 0.0;
            for (int k = 0; k < d; k++) {
                ub[(size_t)i * d + k] = gyb[(size_t)i * d + k] * inv;
                c += gyb[(size_t)i * d + k] * yb[(size_t)i * d + k];
            }
            w[i] = c * inv;
        }
        for (int i = n; i < np; i++) w[i] = 0.0;
        transpose_pad(qb, s.qt, n, np, d);
        transpose_pad(xb, s.xt, n, np, d);
        transpose_pad(ub, s.ut, n, np, d);
        memset(gqt, 0, sizeof(double) * np * d);
        memset(gvt, 0, sizeof(double) * np * d);
        for (int i0 = 0; i0 < n; i0 += RB) {
            const int j0 = i0 - i0 % VL;
            load_rows(qb, s.rows, i0, n, d, stride, 0);
            load_rows(xb, s.rows, i0, n, d, stride, d);
            load_rows(ub, s.rows, i0, n, d, stride, 2 * d);
            double wr[RB];
            for (int rr = 0; rr < RB; rr++) wr[rr] = (i0 + rr < n) ? w[i0 + rr] : 0.0;
            /* scores and p_rj = (u_r . x_j - w_r) + (u_j . x_r - w_j) */
            for (int jc = j0; jc < np; jc += VL) {
                const v8d wv = *(const v8d *)(w + jc);
                v8d s0 = {0}, s1 = {0}, s2 = {0}, s3 = {0};
                s0 -= 1.0; s1 -= 1.0; s2 -= 1.0; s3 -= 1.0;
                v8d p0 = -wv - wr[0], p1 = -wv - wr[1], p2 = -wv - wr[2], p3 = -wv - wr[3];
                for (int k = 0; k < d; k++) {
                    const v8d qv = *(const v8d *)(s.qt + (size_t)k * np + jc);
                    const v8d xv = *(const v8d *)(s.xt + (size_t)k * np + jc);
                    const v8d uv = *(const v8d *)(s.ut + (size_t)k * np + jc);
                    s0 += rq[k] * qv;
                    s1 += rq[stride + k] * qv;
                    s2 += rq[2 * stride + k] * qv;
                    s3 += rq[3 * stride + k] * qv;
                    p0 += ru[k] * xv + rx[k] * uv;
                    p1 += ru[stride + k] * xv + rx[stride + k] * uv;
                    p2 += ru[2 * stride + k] * xv + rx[2 * stride + k] * uv;
                    p3 += ru[3 * stride + k] * xv + rx[3 * stride + k] * uv;
                }
                *(v8d *)(e0 + jc) = s0; *(v8d *)(t0 + jc) = p0;
                *(v8d *)(e1 + jc) = s1; *(v8d *)(t1 + jc) = p1;
                *(v8d *)(e2 + jc) = s2; *(v8d *)(t2 + jc) = p2;
                *(v8d *)(e3 + jc) = s3; *(v8d *)(t3 + jc) = p3;
            }
            exp_and_mask(&s, i0, j0, scale);
            /* t_rj = scale * e_rj * p_rj is the score gradient for both orderings */
            #pragma omp simd
            for (int j = j0; j < np; j++) {
                t0[j] *= scale * e0[j]; t1[j] *= scale * e1[j];
                t2[j] *= scale * e2[j]; t3[j] *= scale * e3[j];
            }
            /* diagonal pairs: gv_i += e_ii u_i, gq_i += 2 scale e_ii (u_i . x_i - w_i) q_i */
            for (int rr = 0; rr < RB && i0 + rr < n; rr++) {
                const double *qi = rq + rr * stride, *xi = rx + rr * stride, *ui = ru + rr * stride;
                double ss = 0.0, ux = 0.0;
                for (int k = 0; k < d; k++) { ss += qi[k] * qi[k]; ux += ui[k] * xi[k]; }
                const double ed = exp(scale * (ss - 1.0));
                const double td = 2.0 * scale * ed * (ux - wr[rr]);
                for (int k = 0; k < d; k++) {
                    gvt[(size_t)k * np + i0 + rr] += ed * ui[k];
                    gqt[(size_t)k * np + i0 + rr] += td * qi[k];
                }
            }
            for (int k = 0; k < d; k++) {
                const double *restrict uk = s.ut + (size_t)k * np;
                const double *restrict qk = s.qt + (size_t)k * np;
                double *restrict gvk = gvt + (size_t)k * np;
                double *restrict gqk = gqt + (size_t)k * np;
                const double u0 = ru[k], u1 = ru[stride + k], u2 = ru[2 * stride + k], u3 = ru[3 * stride + k];
                const double q0 = rq[k], q1 = rq[stride + k], q2 = rq[2 * stride + k], q3 = rq[3 * stride + k];
                double v0 = 0.0, v1 = 0.0, v2 = 0.0, v3 = 0.0;
                double g0 = 0.0, g1 = 0.0, g2 = 0.0, g3 = 0.0;
                #pragma omp simd reduction(+:v0, v1, v2, v3, g0, g1, g2, g3)
                for (int j = j0; j < np; j++) {
                    const double uv = uk[j], qv = qk[j];
                    v0 += e0[j] * uv; v1 += e1[j] * uv; v2 += e2[j] * uv; v3 += e3[j] * uv;
                    g0 += t0[j] * qv; g1 += t1[j] * qv; g2 += t2[j] * qv; g3 += t3[j] * qv;
                    gvk[j] += e0[j] * u0 + e1[j] * u1 + e2[j] * u2 + e3[j] * u3;
                    gqk[j] += t0[j] * q0 + t1[j] * q1 + t2[j] * q2 + t3[j] * q3;
                }
                const double vs[RB] = {v0, v1, v2, v3}, gs[RB] = {g0, g1, g2, g3};
                for (int rr = 0; rr < RB && i0 + rr < n; rr++) {
                    gvk[i0 + rr] += vs[rr];
                    gqk[i0 + rr] += gs[rr];
                }
            }
        }
        for (int i = 0; i < n; i++) {
            const double *qi = qb + (size_t)i * d;
            double dot = 0.0;
            for (int k = 0; k < d; k++) dot += gqt[(size_t)k * np + i] * qi[k];
            const double inv = rb[i] > 0.0 ? 1.0 / rb[i] : 0.0;
            for (int k = 0; k < d; k++)
                gxb[(size_t)i * d + k] = gvt[(size_t)k * np + i] + (gqt[(size_t)k * np + i] - qi[k] * dot) * inv;
        }
    }
    free(ub);
    scratch_free(&s);
    return 0;
}
