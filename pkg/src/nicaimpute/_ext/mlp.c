/*
 * Fused two-layer perceptron with ReLU, multiplicative dropout and a
 * per-row output scale:
 *
 *   act_i = relu(c_i W1 + b1) * keep_i
 *   out_i = (act_i W2 + b2) * rows_i
 *
 * c is (m, din), W1 (din, hid), W2 (hid, dout), keep (m, hid) and rows (m).
 * keep and rows may be NULL, meaning all ones. The forward pass stores act,
 * which is all the backward pass needs besides the inputs: act > 0 exactly
 * where the pre-activation was positive and the unit was kept.
 *
 * Internally the hidden axis is padded to hp (a multiple of VL) and rows are
 * processed RB at a time so each weight tile load feeds RB accumulators.
 */
#include "mlp.h"

#include <stdlib.h>
#include <string.h>

#define RB 4
#define VL 8

typedef double v8d __attribute__((vector_size(VL * sizeof(double))));

static double *alloc_aligned(size_t count)
{
    size_t bytes = ((count * sizeof(double) + 63) / 64) * 64;
    if (bytes == 0) bytes = 64;
    double *p = aligned_alloc(64, bytes);
    if (p) memset(p, 0, bytes);
    return p;
}

/* src (rows x cols) -> dst (rows x ld), zero padded */
static void pad_rows(const double *src, double *dst, int rows, int cols, int ld)
{
    for (int i = 0; i < rows; i++) {
        memcpy(dst + (size_t)i * ld, src + (size_t)i * cols, sizeof(double) * cols);
        for (int j = cols; j < ld; j++) dst[(size_t)i * ld + j] = 0.0;
    }
}

/* src (rows x cols) -> dst (cols x ld) transposed, zero padded */
static void pad_transpose(const double *src, double *dst, int rows, int cols, int ld)
{
    for (int j = 0; j < cols; j++) {
        for (int i = 0; i < rows; i++) dst[(size_t)j * ld + i] = src[(size_t)i * cols + j];
        for (int i = rows; i < ld; i++) dst[(size_t)j * ld + i] = 0.0;
    }
}

static double hsum(v8d v)
{
    double s = 0.0;
    for (int l = 0; l < VL; l++) s += v[l];
    return s;
}

typedef struct {
    int hp;
    double *w1p;   /* din x hp */
    double *w2t;   /* dout x hp */
    double *a;     /* RB x hp: activations of the current row block */
    double *g;     /* RB x hp: hidden gradients of the current row block */
    double *gw1p;  /* din x hp */
    double *gw2t;  /* dout x hp */
} mlp_scratch;

static void mlp_free(mlp_scratch *s)
{
    free(s->w1p); free(s->w2t); free(s->a); free(s->g); free(s->gw1p); free(s->gw2t);
}

static int mlp_alloc(mlp_scratch *s, const double *w1, const double *w2, int din, int hid, int dout,
                     int with_grads)
{
    memset(s, 0, sizeof(*s));
    s->hp = ((hid + VL - 1) / VL) * VL;
    s->w1p = alloc_aligned((size_t)din * s->hp);
    s->w2t = alloc_aligned((size_t)dout * s->hp);
    s->a = alloc_aligned((size_t)RB * s->hp);
    s->g = alloc_aligned((size_t)RB * s->hp);
    if (with_grads) {
        s->gw1p = alloc_aligned((size_t)din * s->hp);
        s->gw2t = alloc_aligned((size_t)dout * s->hp);
    }
    if (!s->w1p || !s->w2t || !s->a || !s->g || (with_grads && (!s->gw1p || !s->gw2t))) {
        mlp_free(s);
        return -1;
    }
    pad_rows(w1, s->w1p, din, hid, s->hp);
    pad_transpose(w2, s->w2t, hid, dout, s->hp);
    return 0;
}

/* hidden pre-activations of rows i0..i0+nr-1 into s->a (padding rows are zero) */
static void hidden_block(const mlp_scratch *s, const double *c, const double *b1, int i0, int nr,
                         int din, int hid)
{
    const int hp = s->hp;
    double bp[VL];
    for (int hc = 0; hc < hp; hc += VL) {
        for (int l = 0; l < VL; l++) bp[l] = hc + l < hid ? b1[hc + l] : 0.0;
        v8d a0, a1, a2, a3;
        memcpy(&a0, bp, sizeof(a0));
        a1 = a0; a2 = a0; a3 = a0;
        const double *c0 = c + (size_t)i0 * din;
        const double *c1 = nr > 1 ? c0 + din : c0;
        const double *c2 = nr > 2 ? c0 + 2 * din : c0;
        const double *c3 = nr > 3 ? c0 + 3 * din : c0;
        for (int k = 0; k < din; k++) {
            const v8d w = *(const v8d *)(s->w1p + (size_t)k * hp + hc);
            a0 += c0[k] * w; a1 += c1[k] * w; a2 += c2[k] * w; a3 += c3[k] * w;
        }
        *(v8d *)(s->a + hc) = a0;
        *(v8d *)(s->a + hp + hc) = a1;
        *(v8d *)(s->a + 2 * hp + hc) = a2;
        *(v8d *)(s->a + 3 * hp + hc) = a3;
    }
}

int mlp_forward(const double *c, const double *w1, const double *b1, const double *w2,
                const double *b2, const double *keep, const double *rows,
                double *act, double *out, int m, int din, int hid, int dout)
{
    mlp_scratch s;
    if (mlp_alloc(&s, w1, w2, din, hid, dout, 0) != 0) return -1;
    const int hp = s.hp;
    for (int i0 = 0; i0 < m; i0 += RB) {
        const int nr = m - i0 < RB ? m - i0 : RB;
        hidden_block(&s, c, b1, i0, nr, din, hid);
        for (int r = 0; r < nr; r++) {
            double *ar = s.a + (size_t)r * hp;
            const double *kr = keep ? keep + (size_t)(i0 + r) * hid : NULL;
            for (int j = 0; j < hid; j++) {
                double v = ar[j] > 0.0 ? ar[j] : 0.0;
                if (kr) v *= kr[j];
                ar[j] = v;
            }
            for (int j = hid; j < hp; j++) ar[j] = 0.0;
            memcpy(act + (size_t)(i0 + r) * hid, ar, sizeof(double) * hid);
        }
        for (int r = nr; r < RB; r++) memset(s.a + (size_t)r * hp, 0, sizeof(double) * hp);
        for (int t = 0; t < dout; t++) {
            v8d o0 = {0}, o1 = {0}, o2 = {0}, o3 = {0};
            const double *wt = s.w2t + (size_t)t * hp;
            for (int hc = 0; hc < hp; hc += VL) {
                const v8d w = *(const v8d *)(wt + hc);
                o0 += *(const v8d *)(s.a + hc) * w;
                o1 += *(const v8d *)(s.a + hp + hc) * w;
                o2 += *(const v8d *)(s.a + 2 * hp + hc) * w;
                o3 += *(const v8d *)(s.a + 3 * hp + hc) * w;
            }
            const double os[RB] = {hsum(o0), hsum(o1), hsum(o2), hsum(o3)};
            for (int r = 0; r < nr; r++)
                out[(size_t)(i0 + r) * dout + t] = (os[r] + b2[t]) * (rows ? rows[i0 + r] : 1.0);
        }
    }
    mlp_free(&s);
    return 0;
}

int mlp_backward(const double *c, const double *w1, const double *w2, const double *act,
                 const double *keep, const double *rows, const double *gout,
                 double *gc, double *gw1, double *gb1, double *gw2, double *gb2,
                 int m, int din, int hid, int dout)
{
    mlp_scratch s;
    if (mlp_alloc(&s, w1, w2, din, hid, dout, 1) != 0) return -1;
    const int hp = s.hp;
    double *go = malloc(sizeof(double) * ((size_t)RB * dout + 1));
    double *gb1p = alloc_aligned(hp);
    if (!go || !gb1p) { free(go); free(gb1p); mlp_free(&s); return -1; }
    memset(gb2, 0, sizeof(double) * dout);
    for (int i0 = 0; i0 < m; i0 += RB) {
        const int nr = m - i0 < RB ? m - i0 : RB;
        /* upstream gradient after the row scale; padding rows contribute nothing */
        for (int r = 0; r < RB; r++)
            for (int t = 0; t < dout; t++) {
                const double g = r < nr ? gout[(size_t)(i0 + r) * dout + t] * (rows ? rows[i0 + r] : 1.0) : 0.0;
                go[r * dout + t] = g;
                gb2[t] += g;
            }
        /* activations of the block, padded */
        for (int r = 0; r < RB; r++) {
            double *ar = s.a + (size_t)r * hp;
            if (r < nr) memcpy(ar, act + (size_t)(i0 + r) * hid, sizeof(double) * hid);
            else memset(ar, 0, sizeof(double) * hid);
            for (int j = hid; j < hp; j++) ar[j] = 0.0;
        }
        /* gh_r = go_r W2^T and gW2^T += go^T act, tile by tile */
        for (int hc = 0; hc < hp; hc += VL) {
            const v8d a0 = *(const v8d *)(s.a + hc), a1 = *(const v8d *)(s.a + hp + hc);
            const v8d a2 = *(const v8d *)(s.a + 2 * hp + hc), a3 = *(const v8d *)(s.a + 3 * hp + hc);
            v8d h0 = {0}, h1 = {0}, h2 = {0}, h3 = {0};
            for (int t = 0; t < dout; t++) {
                const v8d w = *(const v8d *)(s.w2t + (size_t)t * hp + hc);
                const double g0 = go[t], g1 = go[dout + t], g2 = go[2 * dout + t], g3 = go[3 * dout + t];
                h0 += g0 * w; h1 += g1 * w; h2 += g2 * w; h3 += g3 * w;
                v8d *gw = (v8d *)(s.gw2t + (size_t)t * hp + hc);
                *gw += g0 * a0 + g1 * a1 + g2 * a2 + g3 * a3;
            }
            *(v8d *)(s.g + hc) = h0;
            *(v8d *)(s.g + hp + hc) = h1;
            *(v8d *)(s.g + 2 * hp + hc) = h2;
            *(v8d *)(s.g + 3 * hp + hc) = h3;
        }
        /* through dropout and relu */
        for (int r = 0; r < RB; r++) {
            double *gr = s.g + (size_t)r * hp;
            const double *ar = s.a + (size_t)r * hp;
            const double *kr = (keep && r < nr) ? keep + (size_t)(i0 + r) * hid : NULL;
            for (int j = 0; j < hid; j++) {
                double v = ar[j] > 0.0 ? gr[j] : 0.0;
                if (kr) v *= kr[j];
                gr[j] = v;
            }
            for (int j = hid; j < hp; j++) gr[j] = 0.0;
        }
        /* gW1 += c^T gh, gb1 += sum gh */
        const double *c0 = c + (size_t)i0 * din;
        const double *c1 = nr > 1 ? c0 + din : c0;
        const double *c2 = nr > 2 ? c0 + 2 * din : c0;
        const double *c3 = nr > 3 ? c0 + 3 * din : c0;
        for (int hc = 0; hc < hp; hc += VL) {
            const v8d h0 = *(const v8d *)(s.g + hc), h1 = *(const v8d *)(s.g + hp + hc);
            const v8d h2 = *(const v8d *)(s.g + 2 * hp + hc), h3 = *(const v8d *)(s.g + 3 * hp + hc);
            *(v8d *)(gb1p + hc) += h0 + h1 + h2 + h3;
            for (int k = 0; k < din; k++) {
                v8d *gw = (v8d *)(s.gw1p + (size_t)k * hp + hc);
                *gw += c0[k] * h0 + c1[k] * h1 + c2[k] * h2 + c3[k] * h3;
            }
        }
        /* gc_r = gh_r W1^T */
        for (int k = 0; k < din; k++) {
            const double *wk = s.w1p + (size_t)k * hp;
            v8d s0 = {0}, s1 = {0}, s2 = {0}, s3 = {0};
            for (int hc = 0; hc < hp; hc += VL) {
                const v8d w = *(const v8d *)(wk + hc);
                s0 += w * *(const v8d *)(s.g + hc);
                s1 += w * *(const v8d *)(s.g + hp + hc);
                s2 += w * *(const v8d *)(s.g + 2 * hp + hc);
                s3 += w * *(const v8d *)(s.g + 3 * hp + hc);
            }
            const double ss[RB] = {hsum(s0), hsum(s1), hsum(s2), hsum(s3)};
            for (int r = 0; r < nr; r++) gc[(size_t)(i0 + r) * din + k] = ss[r];
        }
    }
    for (int k = 0; k < din; k++) memcpy(gw1 + (size_t)k * hid, s.gw1p + (size_t)k * hp, sizeof(double) * hid);
    for (int j = 0; j < hid; j++) {
        gb1[j] = gb1p[j];
        for (int t = 0; t < dout; t++) gw2[(size_t)j * dout + t] = s.gw2t[(size_t)t * hp + j];
    }
    free(go); free(gb1p);
    mlp_free(&s);
    return 0;
}
