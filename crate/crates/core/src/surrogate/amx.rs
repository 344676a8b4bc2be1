//! Batched MLP inference on the AMX tile unit (x86-64 Linux).
//!
//! Every operand is split into a high and a low bfloat16 half. Accumulating
//! hi·hi + lo·hi + hi·lo in f32 tiles recovers close to single precision
//! (the dropped lo·lo term is ~2^-16 relative), at well under the cost of
//! an f32 GEMM. Used only when the CPU and kernel allow it.

use std::arch::asm;
use std::arch::x86_64::{__cpuid, __cpuid_count, _xgetbv};
use std::sync::OnceLock;

use super::mlp::Mlp;

const TILE_ROWS: usize = 16;
/// bf16 pairs per tile row.
const TILE_K: usize = 32;
const TILE_ELEMS: usize = TILE_ROWS * TILE_K;

/// Whether AMX is usable by this process; asks the kernel for the tile
/// state the first time.
pub(crate) fn available() -> bool {
    static AVAILABLE: OnceLock<bool> = OnceLock::new();
    *AVAILABLE.get_or_init(|| {
        if std::env::var_os("REACH_INTENT_NO_AMX").is_some() {
            return false;
        }
        let ok = cpu_supports() && request_permission();
        log::debug!("surrogate batches on {}", if ok { "AMX" } else { "f32 GEMM" });
        ok
    })
}

fn cpu_supports() -> bool {
    if !is_x86_feature_detected!("avx512f") || !is_x86_feature_detected!("avx512bw") {
        return false;
    }
    // SAFETY: cpuid is available on every x86-64 CPU; xgetbv is guarded by OSXSAVE.
    unsafe {
        if __cpuid(0).eax < 7 {
            return false;
        }
        let edx = __cpuid_count(7, 0).edx;
        let (amx_bf16, amx_tile) = (edx & (1 << 22) != 0, edx & (1 << 24) != 0);
        let osxsave = __cpuid(1).ecx & (1 << 27) != 0;
        // XTILECFG and XTILEDATA enabled in XCR0.
        amx_bf16 && amx_tile && osxsave && (_xgetbv(0) >> 17) & 3 == 3
    }
}

fn request_permission() -> bool {
    const SYS_ARCH_PRCTL: i64 = 158;
    const ARCH_REQ_XCOMP_PERM: i64 = 0x1023;
    const XFEATURE_XTILEDATA: i64 = 18;
    let ret: i64;
    // SAFETY: arch_prctl with these arguments only changes the permitted
    // xsave features of this process.
    unsafe {
        asm!(
            "syscall",
            inlateout("rax") SYS_ARCH_PRCTL => ret,
            in("rdi") ARCH_REQ_XCOMP_PERM,
            in("rsi") XFEATURE_XTILEDATA,
            lateout("rcx") _,
            lateout("r11") _,
            options(nostack)
        );
    }
    ret == 0
}

fn bf16(x: f32) -> u16 {
    let b = x.to_bits();
    (b.wrapping_add(0x7fff + ((b >> 16) & 1)) >> 16) as u16
}

fn from_bf16(h: u16) -> f32 {
    f32::from_bits((h as u32) << 16)
}

fn split(x: f32) -> (u16, u16) {
    let hi = bf16(x);
    (hi, bf16(x - from_bf16(hi)))
}

#[derive(Clone, PartialEq)]
struct PackedLayer {
    outputs: usize,
    /// Inputs rounded up to whole tiles: one or two.
    chunks: usize,
    tiles: usize,
    /// Per output tile: the hi halves of each chunk, then the lo halves, each
    /// a 16×32 block in pair-interleaved (VNNI) order.
    weights: Vec<u16>,
    /// Padded to whole output tiles.
    bias: Vec<f32>,
}

impl PackedLayer {
    fn k_pad(&self) -> usize {
        self.chunks * TILE_K
    }
}

/// An [`Mlp`] with hidden ReLUs, repacked for the tile unit.
#[derive(Clone, PartialEq)]
pub(crate) struct PackedMlp {
    inputs: usize,
    layers: Vec<PackedLayer>,
}

impl std::fmt::Debug for PackedMlp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let sizes: Vec<_> = self.layers.iter().map(|l| l.outputs).collect();
        write!(f, "PackedMlp({} -> {sizes:?})", self.inputs)
    }
}

#[repr(C, align(64))]
struct TileConfig {
    palette: u8,
    start_row: u8,
    reserved: [u8; 14],
    colsb: [u16; 16],
    rows: [u8; 16],
}

impl PackedMlp {
    /// `None` when AMX is unusable or a layer is wider than two tiles of inputs.
    pub(crate) fn new(mlp: &Mlp<f32>) -> Option<Self> {
        if !available() || mlp.layers.is_empty() || mlp.layers.iter().any(|l| l.inputs() > 2 * TILE_K) {
            return None;
        }
        let layers = mlp
            .layers
            .iter()
            .map(|l| {
                let (outputs, inputs) = (l.outputs(), l.inputs());
                let chunks = inputs.div_ceil(TILE_K);
                let tiles = outputs.div_ceil(TILE_ROWS);
                let mut weights = vec![0u16; tiles * chunks * 2 * TILE_ELEMS];
                for t in 0..tiles {
                    for c in 0..chunks {
                        for r in 0..TILE_ROWS {
                            for col in 0..TILE_ROWS {
                                for j in 0..2 {
                                    let (m, k) = (t * TILE_ROWS + col, c * TILE_K + 2 * r + j);
                                    let v = if m < outputs && k < inputs { l.weight[(m, k)] } else { 0.0 };
                                    let (hi, lo) = split(v);
                                    let at = r * TILE_K + col * 2 + j;
                                    weights[((t * 2) * chunks + c) * TILE_ELEMS + at] = hi;
                                    weights[((t * 2 + 1) * chunks + c) * TILE_ELEMS + at] = lo;
                                }
                            }
                        }
                    }
                }
                let mut bias = vec![0.0; tiles * TILE_ROWS];
                bias[..outputs].copy_from_slice(l.bias.as_slice());
                PackedLayer {
                    outputs,
                    chunks,
                    tiles,
                    weights,
                    bias,
                }
            })
            .collect();
        Some(Self {
            inputs: mlp.input_size(),
            layers,
        })
    }

    /// Row-major `[sample][input]` to `[sample][output]`, written into `out`.
    pub(crate) fn forward_into(&self, x: &[f32], mut out: Vec<f32>) -> Vec<f32> {
        let n = x.len() / self.inputs;
        let outputs = self.layers.last().expect("at least one layer").outputs;
        // Every element is overwritten, so a reused buffer needs no clearing.
        out.resize(n * outputs, 0.0);
        // SAFETY: `new` only succeeds after `available` confirmed AVX-512 and
        // AMX with the tile permission granted.
        unsafe { self.run(x, n, &mut out) };
        out
    }

    #[target_feature(enable = "avx512f,avx512bw")]
    unsafe fn run(&self, x: &[f32], n: usize, out: &mut [f32]) {
        let outputs = self.layers.last().unwrap().outputs;
        // Activations entering each layer, 16 samples at a time.
        let mut acts: Vec<Vec<f32>> = self.layers.iter().map(|l| vec![0.0; TILE_ROWS * l.k_pad()]).collect();
        let k_max = self.layers.iter().map(PackedLayer::k_pad).max().unwrap();
        let (mut hi, mut lo) = (vec![0u16; TILE_ROWS * k_max], vec![0u16; TILE_ROWS * k_max]);
        let mut scratch = [0f32; TILE_ROWS * TILE_ROWS];

        let mut config = TileConfig {
            palette: 1,
            start_row: 0,
            reserved: [0; 14],
            colsb: [0; 16],
            rows: [0; 16],
        };
        for t in 0..8 {
            config.colsb[t] = 64;
            config.rows[t] = TILE_ROWS as u8;
        }
        asm!("ldtilecfg [{}]", in(reg) &config as *const TileConfig, options(nostack, readonly));

        for n0 in (0..n).step_by(TILE_ROWS) {
            let rows = TILE_ROWS.min(n - n0);
            let k0 = self.layers[0].k_pad();
            for r in 0..rows {
                let src = &x[(n0 + r) * self.inputs..(n0 + r + 1) * self.inputs];
                acts[0][r * k0..r * k0 + self.inputs].copy_from_slice(src);
            }
            for (l, layer) in self.layers.iter().enumerate() {
                let k = layer.k_pad();
                split_rows(&acts[l][..TILE_ROWS * k], &mut hi, &mut lo, l > 0);
                load_activations(&hi, &lo, layer.chunks, k);
                let last = l + 1 == self.layers.len();
                let next = if last { std::ptr::null_mut() } else { acts[l + 1].as_mut_ptr() };
                for t in 0..layer.tiles {
                    let direct = !last || (rows == TILE_ROWS && (t + 1) * TILE_ROWS <= outputs);
                    let (dst, stride) = if last && direct {
                        (out.as_mut_ptr().add(n0 * outputs + t * TILE_ROWS), outputs)
                    } else if last {
                        (scratch.as_mut_ptr(), TILE_ROWS)
                    } else {
                        (next.add(t * TILE_ROWS), self.layers[l + 1].k_pad())
                    };
                    let w = layer.weights.as_ptr().add(t * 2 * layer.chunks * TILE_ELEMS);
                    output_tile(layer.bias.as_ptr().add(t * TILE_ROWS), w, layer.chunks, dst, stride * 4);
                    if !direct {
                        let cols = TILE_ROWS.min(outputs - t * TILE_ROWS);
                        for r in 0..rows {
                            let o = (n0 + r) * outputs + t * TILE_ROWS;
                            out[o..o + cols].copy_from_slice(&scratch[r * TILE_ROWS..r * TILE_ROWS + cols]);
                        }
                    }
                }
            }
        }
        asm!("tilerelease", options(nostack, nomem));
    }
}

/// Splits activations (ReLU'd for hidden layers) into bf16 halves.
#[inline(always)]
fn split_rows(acts: &[f32], hi: &mut [u16], lo: &mut [u16], relu: bool) {
    let lanes = acts.chunks_exact(16).zip(hi.chunks_exact_mut(16)).zip(lo.chunks_exact_mut(16));
    for ((a, h), o) in lanes {
        for i in 0..16 {
            let v = if relu { a[i].max(0.0) } else { a[i] };
            (h[i], o[i]) = split(v);
        }
    }
}

/// tmm1/tmm2: hi halves of input chunks 0/1; tmm3/tmm4: lo halves.
#[inline(always)]
unsafe fn load_activations(hi: &[u16], lo: &[u16], chunks: usize, k_pad: usize) {
    let stride = k_pad * 2;
    asm!(
        "tileloadd tmm1, [{hi} + {s}*1]",
        "tileloadd tmm3, [{lo} + {s}*1]",
        hi = in(reg) hi.as_ptr(),
        lo = in(reg) lo.as_ptr(),
        s = in(reg) stride,
        out("tmm1") _, out("tmm3") _,
        options(nostack, readonly)
    );
    if chunks == 2 {
        asm!(
            "tileloadd tmm2, [{hi} + {s}*1]",
            "tileloadd tmm4, [{lo} + {s}*1]",
            hi = in(reg) hi.as_ptr().add(TILE_K),
            lo = in(reg) lo.as_ptr().add(TILE_K),
            s = in(reg) stride,
            out("tmm2") _, out("tmm4") _,
            options(nostack, readonly)
        );
    }
}

/// One 16×16 output tile: bias plus the three cross products, stored at `dst`.
#[inline(always)]
unsafe fn output_tile(bias: *const f32, w: *const u16, chunks: usize, dst: *mut f32, stride_bytes: usize) {
    if chunks == 1 {
        asm!(
            "tileloadd tmm0, [{bias} + {zero}*1]",
            "tileloadd tmm5, [{whi} + {s}*1]",
            "tileloadd tmm6, [{wlo} + {s}*1]",
            "tdpbf16ps tmm0, tmm1, tmm5",
            "tdpbf16ps tmm0, tmm3, tmm5",
            "tdpbf16ps tmm0, tmm1, tmm6",
            "tilestored [{dst} + {ds}*1], tmm0",
            bias = in(reg) bias,
            zero = in(reg) 0usize,
            whi = in(reg) w,
            wlo = in(reg) w.add(TILE_ELEMS),
            s = in(reg) 64usize,
            dst = in(reg) dst,
            ds = in(reg) stride_bytes,
            out("tmm0") _, out("tmm5") _, out("tmm6") _,
            options(nostack)
        );
    } else {
        asm!(
            "tileloadd tmm0, [{bias} + {zero}*1]",
            "tileloadd tmm5, [{whi0} + {s}*1]",
            "tileloadd tmm6, [{whi1} + {s}*1]",
            "tileloadd tmm7, [{wlo0} + {s}*1]",
            "tdpbf16ps tmm0, tmm1, tmm5",
            "tdpbf16ps tmm0, tmm2, tmm6",
            "tdpbf16ps tmm0, tmm3, tmm5",
            "tdpbf16ps tmm0, tmm4, tmm6",
            "tdpbf16ps tmm0, tmm1, tmm7",
            "tileloadd tmm5, [{wlo1} + {s}*1]",
            "tdpbf16ps tmm0, tmm2, tmm5",
            "tilestored [{dst} + {ds}*1], tmm0",
            bias = in(reg) bias,
            zero = in(reg) 0usize,
            whi0 = in(reg) w,
            whi1 = in(reg) w.add(TILE_ELEMS),
            wlo0 = in(reg) w.add(2 * TILE_ELEMS),
            wlo1 = in(reg) w.add(3 * TILE_ELEMS),
            s = in(reg) 64usize,
            dst = in(reg) dst,
            ds = in(reg) stride_bytes,
            out("tmm0") _, out("tmm5") _, out("tmm6") _, out("tmm7") _,
            options(nostack)
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_halves_sum_to_nearly_the_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let x: f32 = rng.random_range(-10.0..10.0);
            let (hi, lo) = split(x);
            let back = from_bf16(hi) + from_bf16(lo);
            assert!((back - x).abs() <= x.abs() * 2f32.powi(-16), "{x} {back}");
        }
        assert_eq!(split(1.0), (0x3f80, 0));
    }

    #[test]
    fn tiles_match_the_f32_network() {
        if !available() {
            eprintln!("AMX unavailable; skipped");
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for sizes in [&[3, 32, 64, 270][..], &[3, 5, 17], &[40, 64, 3]] {
            let mlp = Mlp::<f32>::init(sizes, &mut rng);
            let packed = PackedMlp::new(&mlp).unwrap();
            for n in [1, 15, 16, 17, 100] {
                let x: Vec<f32> = (0..n * sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
                let reference = mlp.forward(&DMatrix::from_column_slice(sizes[0], n, &x));
                let got = packed.forward_into(&x, Vec::new());
                let scale = reference.amax().max(1.0);
                for (a, b) in got.iter().zip(reference.iter()) {
                    assert!((a - b).abs() <= 1e-5 * scale, "{sizes:?} n={n}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn wide_layers_are_declined() {
        let mlp = Mlp::<f32>::init(&[3, 65, 2], &mut ChaCha8Rng::seed_from_u64(3));
        assert!(PackedMlp::new(&mlp).is_none());
    }
}
