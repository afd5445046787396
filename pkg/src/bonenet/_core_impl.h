/* Hot kernels for conv / max-pool, float64, stride-1 convolution.
 *
 * Convolution planes are processed as one fused loop over the padded row
 * width: the few wrap columns per row compute values that are discarded
 * (forward) or multiplied by zero (weight gradient), trading ~Wp/Wo extra
 * flops for long vectorizable streams. This is what keeps the deep layers
 * (tiny spatial planes) at full SIMD throughput.
 *
 * Determinism contract: every output element is written by exactly one
 * OpenMP work item and its reduction order is fixed at compile time, so
 * results are bitwise identical for any thread count.
 */
#ifndef BONENET_CORE_IMPL_H
#define BONENET_CORE_IMPL_H

#include <stdlib.h>
#include <string.h>

#ifdef _OPENMP
#include <omp.h>
#endif

/* Planes up to this many doubles use the fused path (scratch stays in L1). */
#define BN_FUSE_LIMIT 1536

/* out[b,o] = bias[o] + cross-correlation of padded input with w[o].
 * xp: [B,C,Hp,Wp] pre-padded, w: [O,C,kh,kw], out: [B,O,Ho,Wo]. */
static void bn_conv2d_fwd(const double *restrict xp, const double *restrict w,
                          const double *restrict bias, double *restrict out,
                          long B, long C, long Hp, long Wp,
                          long O, long kh, long kw)
{
    const long Ho = Hp - kh + 1;
    const long Wo = Wp - kw + 1;
    const long N = (Ho - 1) * Wp + Wo; /* fused plane loop bound */
    const int fuse = Ho * Wp <= BN_FUSE_LIMIT;
    long bo;
#pragma omp parallel
    {
        double *restrict scr =
            fuse ? (double *)malloc((size_t)(Ho * Wp) * sizeof(double)) : NULL;
#pragma omp for schedule(static)
        for (bo = 0; bo < B * O; bo++) {
            const long b = bo / O;
            const long o = bo % O;
            const double bz = bias ? bias[o] : 0.0;
            double *restrict plane = out + bo * Ho * Wo;
            if (fuse) {
                for (long t = 0; t < N; t++)
                    scr[t] = bz;
                for (long c = 0; c < C; c++) {
                    const double *restrict in = xp + (b * C + c) * Hp * Wp;
                    const double *restrict wc = w + (o * C + c) * kh * kw;
                    for (long u = 0; u < kh; u++) {
                        const double *restrict src = in + u * Wp;
                        if (kw == 3) {
                            const double w0 = wc[u * 3], w1 = wc[u * 3 + 1], w2 = wc[u * 3 + 2];
                            for (long t = 0; t < N; t++)
                                scr[t] += w0 * src[t] + w1 * src[t + 1] + w2 * src[t + 2];
                        } else {
                            for (long v = 0; v < kw; v++) {
                                const double wv = wc[u * kw + v];
                                for (long t = 0; t < N; t++)
                                    scr[t] += wv * src[t + v];
                            }
                        }
                    }
                }
                for (long i = 0; i < Ho; i++)
                    memcpy(plane + i * Wo, scr + i * Wp, (size_t)Wo * sizeof(double));
            } else {
                for (long t = 0; t < Ho * Wo; t++)
                    plane[t] = bz;
                for (long c = 0; c < C; c++) {
                    const double *restrict in = xp + (b * C + c) * Hp * Wp;
                    const double *restrict wc = w + (o * C + c) * kh * kw;
                    for (long i = 0; i < Ho; i++) {
                        double *restrict orow = plane + i * Wo;
                        for (long u = 0; u < kh; u++) {
                            const double *restrict irow = in + (i + u) * Wp;
                            if (kw == 3) {
                                const double w0 = wc[u * 3], w1 = wc[u * 3 + 1], w2 = wc[u * 3 + 2];
                                for (long j = 0; j < Wo; j++)
                                    orow[j] += w0 * irow[j] + w1 * irow[j + 1] + w2 * irow[j + 2];
                            } else {
                                for (long v = 0; v < kw; v++) {
                                    const double wv = wc[u * kw + v];
                                    for (long j = 0; j < Wo; j++)
                                        orow[j] += wv * irow[j + v];
                                }
                            }
                        }
                    }
                }
            }
        }
        if (scr)
            free(scr);
    }
}

/* dw[o,c,u,v] = sum_{b,i,j} xp[b,c,i+u,j+v] * dy[b,o,i,j].
 * Small planes: dy is re-laid out at padded width with zeroed wrap columns
 * so the reduction runs as one long dot product per tap. Large planes use
 * per-row dots. Parallel over o; fixed order over b keeps it deterministic. */
static void bn_conv2d_bwd_w(const double *restrict xp, const double *restrict dy,
                            double *restrict dw,
                            long B, long C, long Hp, long Wp,
                            long O, long kh, long kw)
{
    const long Ho = Hp - kh + 1;
    const long Wo = Wp - kw + 1;
    const long N = (Ho - 1) * Wp + Wo;
    const int fuse = Ho * Wp <= BN_FUSE_LIMIT;
    long o;
#pragma omp parallel
    {
        double *restrict g =
            fuse ? (double *)malloc((size_t)(Ho * Wp) * sizeof(double)) : NULL;
#pragma omp for schedule(static)
        for (o = 0; o < O; o++) {
            double *restrict acc = dw + o * C * kh * kw;
            for (long t = 0; t < C * kh * kw; t++)
                acc[t] = 0.0;
            for (long b = 0; b < B; b++) {
                const double *restrict dplane = dy + (b * O + o) * Ho * Wo;
                if (fuse) {
                    memset(g, 0, (size_t)(Ho * Wp) * sizeof(double));
                    for (long i = 0; i < Ho; i++)
                        memcpy(g + i * Wp, dplane + i * Wo, (size_t)Wo * sizeof(double));
                    for (long c = 0; c < C; c++) {
                        const double *restrict in = xp + (b * C + c) * Hp * Wp;
                        for (long u = 0; u < kh; u++) {
                            const double *restrict src = in + u * Wp;
                            for (long v = 0; v < kw; v++) {
                                double s = 0.0;
                                for (long t = 0; t < N; t++)
                                    s += g[t] * src[t + v];
                                acc[(c * kh + u) * kw + v] += s;
                            }
                        }
                    }
                } else {
                    for (long c = 0; c < C; c++) {
                        const double *restrict in = xp + (b * C + c) * Hp * Wp;
                        for (long i = 0; i < Ho; i++) {
                            const double *restrict grow = dplane + i * Wo;
                            for (long u = 0; u < kh; u++) {
                                const double *restrict irow = in + (i + u) * Wp;
                                for (long v = 0; v < kw; v++) {
                                    double s = 0.0;
                                    for (long j = 0; j < Wo; j++)
                                        s += grow[j] * irow[j + v];
                                    acc[(c * kh + u) * kw + v] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
        if (g)
            free(g);
    }
}

/* Per-window max with first-occurrence tie break; records the flat plane
 * index of each argmax for the backward scatter. */
static void bn_maxpool2d_fwd(const double *restrict x, double *restrict out,
                             long long *restrict idx,
                             long B, long C, long H, long W,
                             long win, long stride)
{
    const long Ho = (H - win) / stride + 1;
    const long Wo = (W - win) / stride + 1;
    long bc;
#pragma omp parallel for schedule(static)
    for (bc = 0; bc < B * C; bc++) {
        const double *restrict in = x + bc * H * W;
        double *restrict po = out + bc * Ho * Wo;
        long long *restrict pi = idx + bc * Ho * Wo;
        for (long i = 0; i < Ho; i++) {
            for (long j = 0; j < Wo; j++) {
                const long i0 = i * stride, j0 = j * stride;
                double best = in[i0 * W + j0];
                long bt = i0 * W + j0;
                for (long u = 0; u < win; u++) {
                    for (long v = 0; v < win; v++) {
                        const long t = (i0 + u) * W + j0 + v;
                        if (in[t] > best) {
                            best = in[t];
                            bt = t;
                        }
                    }
                }
                po[i * Wo + j] = best;
                pi[i * Wo + j] = bt;
            }
        }
    }
}

/* Scatter upstream gradient back onto the argmax positions. dx must be
 * zero-initialised by the caller. */
static void bn_maxpool2d_bwd(const double *restrict dy,
                             const long long *restrict idx,
                             double *restrict dx,
                             long B, long C, long HW_in, long HW_out)
{
    long bc;
#pragma omp parallel for schedule(static)
    for (bc = 0; bc < B * C; bc++) {
        const double *restrict g = dy + bc * HW_out;
        const long long *restrict pi = idx + bc * HW_out;
        double *restrict d = dx + bc * HW_in;
        for (long t = 0; t < HW_out; t++)
            d[pi[t]] += g[t];
    }
}

#endif /* BONENET_CORE_IMPL_H */
