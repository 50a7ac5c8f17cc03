/* Direct NHWC convolution loops, stride 1, odd square kernels.
 *
 * Inputs arrive zero-padded by p = (k - 1) / 2 on each spatial side, so no
 * bounds checks are needed. Work is tiled as PB output pixels x VB channels;
 * the PB accumulators are independent FMA chains that share each weight
 * load. Leftover pixels and channels take plain loops.
 */
#ifndef CRM_CONV_H
#define CRM_CONV_H

#include <stddef.h>
#include <string.h>

#define VB 8
#define PB 4

/* four doubles; gcc/clang lower this to whatever SIMD width is available */
typedef double v4d __attribute__((vector_size(32)));

static inline v4d load4(const double *p)
{
    v4d v;
    memcpy(&v, p, sizeof v);
    return v;
}

static inline void store4(double *p, v4d v) { memcpy(p, &v, sizeof v); }

/* out[b,h,w,co] = bias[co] + sum_{dy,dx,ci} xp[b,h+dy,w+dx,ci] * wt[dy,dx,ci,co] */
static void conv_fwd(const double *restrict xp, const double *restrict wt, const double *restrict bias,
                     double *restrict out, ptrdiff_t B, ptrdiff_t H, ptrdiff_t W, ptrdiff_t Cin,
                     ptrdiff_t Cout, ptrdiff_t k)
{
    const ptrdiff_t Wp = W + k - 1, Hp = H + k - 1;
    for (ptrdiff_t b = 0; b < B; b++)
        for (ptrdiff_t h = 0; h < H; h++) {
            ptrdiff_t w0 = 0;
            for (; w0 + PB <= W; w0 += PB) {
                double *o = out + ((b * H + h) * W + w0) * Cout;
                ptrdiff_t c0 = 0;
                for (; c0 + VB <= Cout; c0 += VB) {
                    v4d acc[PB][2];
                    for (int q = 0; q < PB; q++) {
                        acc[q][0] = load4(bias + c0);
                        acc[q][1] = load4(bias + c0 + 4);
                    }
                    for (ptrdiff_t dy = 0; dy < k; dy++) {
                        const double *row = xp + ((b * Hp + h + dy) * Wp + w0) * Cin;
                        for (ptrdiff_t dx = 0; dx < k; dx++) {
                            const double *x0 = row + dx * Cin;
                            const double *wp = wt + (dy * k + dx) * Cin * Cout + c0;
                            for (ptrdiff_t ci = 0; ci < Cin; ci++) {
                                v4d w_lo = load4(wp + ci * Cout), w_hi = load4(wp + ci * Cout + 4);
                                for (int q = 0; q < PB; q++) {
                                    double xv = x0[q * Cin + ci];
                                    acc[q][0] += xv * w_lo;
                                    acc[q][1] += xv * w_hi;
                                }
                            }
                        }
                    }
                    for (int q = 0; q < PB; q++) {
                        store4(o + q * Cout + c0, acc[q][0]);
                        store4(o + q * Cout + c0 + 4, acc[q][1]);
                    }
                }
                for (; c0 < Cout; c0++)
                    for (int q = 0; q < PB; q++) {
                        double acc = bias[c0];
                        for (ptrdiff_t dy = 0; dy < k; dy++)
                            for (ptrdiff_t dx = 0; dx < k; dx++) {
                                const double *x0 = xp + ((b * Hp + h + dy) * Wp + w0 + q + dx) * Cin;
                                const double *wp = wt + (dy * k + dx) * Cin * Cout + c0;
                                for (ptrdiff_t ci = 0; ci < Cin; ci++)
                                    acc += x0[ci] * wp[ci * Cout];
                            }
                        o[q * Cout + c0] = acc;
                    }
            }
            for (; w0 < W; w0++) {
                double *o = out + ((b * H + h) * W + w0) * Cout;
                for (ptrdiff_t c0 = 0; c0 < Cout; c0++) {
                    double acc = bias[c0];
                    for (ptrdiff_t dy = 0; dy < k; dy++)
                        for (ptrdiff_t dx = 0; dx < k; dx++) {
                            const double *x0 = xp + ((b * Hp + h + dy) * Wp + w0 + dx) * Cin;
                            const double *wp = wt + (dy * k + dx) * Cin * Cout + c0;
                            for (ptrdiff_t ci = 0; ci < Cin; ci++)
                                acc += x0[ci] * wp[ci * Cout];
                        }
                    o[c0] = acc;
                }
            }
        }
}

/* out[dy,dx,ci,co] = sum_{b,h,w} xp[b,h+dy,w+dx,ci] * g[b,h,w,co]
   Walks blocks of RB rows and adds each block's contribution to every tap,
   so the rows being read stay in cache while out (k*k*Cin*Cout) sits in L2. */
#define RB 4

static void conv_bwd_weight(const double *restrict xp, const double *restrict g, double *restrict out,
                            ptrdiff_t B, ptrdiff_t H, ptrdiff_t W, ptrdiff_t Cin, ptrdiff_t Cout,
                            ptrdiff_t k)
{
    const ptrdiff_t Wp = W + k - 1, Hp = H + k - 1;
    memset(out, 0, (size_t)(k * k * Cin * Cout) * sizeof(double));
    for (ptrdiff_t b = 0; b < B; b++)
        for (ptrdiff_t h0 = 0; h0 < H; h0 += RB) {
            const ptrdiff_t h1 = h0 + RB < H ? h0 + RB : H;
            for (ptrdiff_t dy = 0; dy < k; dy++)
                for (ptrdiff_t dx = 0; dx < k; dx++) {
                    double *tap = out + (dy * k + dx) * Cin * Cout;
                    ptrdiff_t ci0 = 0;
                    for (; ci0 + PB <= Cin; ci0 += PB) {
                        ptrdiff_t c0 = 0;
                        for (; c0 + VB <= Cout; c0 += VB) {
                            v4d acc[PB][2];
                            for (int q = 0; q < PB; q++) {
                                acc[q][0] = load4(tap + (ci0 + q) * Cout + c0);
                                acc[q][1] = load4(tap + (ci0 + q) * Cout + c0 + 4);
                            }
                            for (ptrdiff_t h = h0; h < h1; h++) {
                                const double *xrow = xp + ((b * Hp + h + dy) * Wp + dx) * Cin + ci0;
                                const double *grow = g + (b * H + h) * W * Cout + c0;
                                for (ptrdiff_t w = 0; w < W; w++) {
                                    v4d g_lo = load4(grow + w * Cout), g_hi = load4(grow + w * Cout + 4);
                                    const double *xv = xrow + w * Cin;
                                    for (int q = 0; q < PB; q++) {
                                        acc[q][0] += xv[q] * g_lo;
                                        acc[q][1] += xv[q] * g_hi;
                                    }
                                }
                            }
                            for (int q = 0; q < PB; q++) {
                                store4(tap + (ci0 + q) * Cout + c0, acc[q][0]);
                                store4(tap + (ci0 + q) * Cout + c0 + 4, acc[q][1]);
                            }
                        }
                        for (ptrdiff_t c = c0; c < Cout; c++)
                            for (ptrdiff_t h = h0; h < h1; h++)
                                for (ptrdiff_t w = 0; w < W; w++) {
                                    const double *xv = xp + ((b * Hp + h + dy) * Wp + w + dx) * Cin + ci0;
                                    double gv = g[((b * H + h) * W + w) * Cout + c];
                                    for (int q = 0; q < PB; q++)
                                        tap[(ci0 + q) * Cout + c] += xv[q] * gv;
                                }
                    }
                    for (; ci0 < Cin; ci0++)
                        for (ptrdiff_t c = 0; c < Cout; c++) {
                            double acc = tap[ci0 * Cout + c];
                            for (ptrdiff_t h = h0; h < h1; h++)
                                for (ptrdiff_t w = 0; w < W; w++)
                                    acc += xp[((b * Hp + h + dy) * Wp + w + dx) * Cin + ci0] *
                                           g[((b * H + h) * W + w) * Cout + c];
                            tap[ci0 * Cout + c] = acc;
                        }
                }
        }
}

#endif
