//! Analytic flop counting.
//!
//! One multiply-accumulate is two flops. A length-`n` dot product plus its
//! bias is counted as `2n` (n multiplies, n-1 adds, one bias add), which is
//! why convolution and dense layers carry no separate bias term. Activations
//! and other elementwise ops cost one flop per element; pooling and
//! upsampling cost one flop per output element. Concatenation is free.

pub fn conv2d(n: usize, cin: usize, cout: usize, kh: usize, kw: usize, ho: usize, wo: usize) -> u64 {
    2 * (kh * kw * cin * cout * ho * wo * n) as u64
}

pub fn dense(n: usize, fin: usize, fout: usize) -> u64 {
    2 * (fin * fout * n) as u64
}

pub fn elementwise(len: usize) -> u64 {
    len as u64
}

pub fn resample(out_len: usize) -> u64 {
    out_len as u64
}
