//! Naive reference implementations shared by the integration suites.
#![allow(dead_code)]

use gseg::{Element, LabelMask, Tensor};
use rand::Rng;

pub fn random_tensor<T: Element, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-1.0..1.0)))
}

pub fn random_mask<R: Rng>(rng: &mut R, shape: &[usize], classes: u8) -> LabelMask {
    let n = shape.iter().product();
    LabelMask::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

fn unravel(mut i: usize, dims: &[usize]) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for a in (0..dims.len()).rev() {
        out[a] = i % dims[a];
        i /= dims[a];
    }
    out
}

fn ravel(idx: &[usize], dims: &[usize]) -> usize {
    idx.iter().zip(dims).fold(0, |acc, (&i, &d)| acc * d + i)
}

/// Zero-padded "same" cross-correlation, one output element at a time.
/// `x [b, s.., c_in]`, `k [f.., c_in, c_out]`; output extent `ceil(n / stride)`
/// with `max((out - 1) * stride + f - n, 0) / 2` leading padding.
pub fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, bias: Option<&[f64]>, stride: usize) -> Tensor<f64> {
    let xs = x.shape();
    let rank = xs.len() - 2;
    let (b, sp, cin) = (xs[0], &xs[1..=rank], xs[rank + 1]);
    let f = &k.shape()[..rank];
    let cout = k.shape()[rank + 1];
    let osp: Vec<usize> = sp.iter().map(|&n| n.div_ceil(stride)).collect();
    let pad: Vec<isize> = (0..rank)
        .map(|a| (((osp[a] - 1) * stride + f[a]) as isize - sp[a] as isize).max(0) / 2)
        .collect();
    let mut oshape = vec![b];
    oshape.extend(&osp);
    oshape.push(cout);
    let taps: usize = f.iter().product();
    let ovox: usize = osp.iter().product();
    let mut out = vec![0.0; b * ovox * cout];
    for n in 0..b {
        for ov in 0..ovox {
            let o = unravel(ov, &osp);
            for co in 0..cout {
                let mut acc = bias.map_or(0.0, |bb| bb[co]);
                for t in 0..taps {
                    let d = unravel(t, f);
                    let i: Vec<isize> = (0..rank).map(|a| (o[a] * stride + d[a]) as isize - pad[a]).collect();
                    if i.iter().zip(sp).any(|(&i, &n)| i < 0 || i as usize >= n) {
                        continue;
                    }
                    let iu: Vec<usize> = i.iter().map(|&v| v as usize).collect();
                    let xbase = (n * sp.iter().product::<usize>() + ravel(&iu, sp)) * cin;
                    for ci in 0..cin {
                        acc += x.data()[xbase + ci] * k.data()[(t * cin + ci) * cout + co];
                    }
                }
                out[(n * ovox + ov) * cout + co] = acc;
            }
        }
    }
    Tensor::new(oshape, out).unwrap()
}

/// Transposed convolution as the scatter adjoint of a strided "same"
/// convolution from extent `n * stride` down to `n`.
pub fn naive_conv_transpose(x: &Tensor<f64>, k: &Tensor<f64>, bias: Option<&[f64]>, stride: usize) -> Tensor<f64> {
    let xs = x.shape();
    let rank = xs.len() - 2;
    let (b, sp, cin) = (xs[0], &xs[1..=rank], xs[rank + 1]);
    let f = &k.shape()[..rank];
    let cout = k.shape()[rank + 1];
    let osp: Vec<usize> = sp.iter().map(|&n| n * stride).collect();
    let pad: Vec<isize> = (0..rank).map(|a| (f[a] as isize - stride as isize).max(0) / 2).collect();
    let mut oshape = vec![b];
    oshape.extend(&osp);
    oshape.push(cout);
    let ovox: usize = osp.iter().product();
    let ivox: usize = sp.iter().product();
    let taps: usize = f.iter().product();
    let mut out = vec![0.0; b * ovox * cout];
    for n in 0..b {
        for v in 0..ovox * cout {
            out[n * ovox * cout + v] = bias.map_or(0.0, |bb| bb[v % cout]);
        }
        for iv in 0..ivox {
            let i = unravel(iv, sp);
            for t in 0..taps {
                let d = unravel(t, f);
                let o: Vec<isize> = (0..rank).map(|a| (i[a] * stride + d[a]) as isize - pad[a]).collect();
                if o.iter().zip(&osp).any(|(&o, &n)| o < 0 || o as usize >= n) {
                    continue;
                }
                let ou: Vec<usize> = o.iter().map(|&v| v as usize).collect();
                let obase = (n * ovox + ravel(&ou, &osp)) * cout;
                for ci in 0..cin {
                    let xv = x.data()[(n * ivox + iv) * cin + ci];
                    for co in 0..cout {
                        out[obase + co] += xv * k.data()[(t * cin + ci) * cout + co];
                    }
                }
            }
        }
    }
    Tensor::new(oshape, out).unwrap()
}

pub struct BruteMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub dice: f64,
    pub hausdorff: Option<f64>,
}

fn brute_boundary(m: &LabelMask, class: u8) -> Vec<Vec<usize>> {
    let dims = m.shape();
    let mut pts = Vec::new();
    for (v, &l) in m.labels().iter().enumerate() {
        if l != class {
            continue;
        }
        let p = unravel(v, dims);
        let edge = (0..dims.len()).any(|a| {
            (p[a] == 0 || m.labels()[v - ravel(&unit(a, dims.len()), dims)] != class)
                || (p[a] + 1 == dims[a] || m.labels()[v + ravel(&unit(a, dims.len()), dims)] != class)
        });
        if edge {
            pts.push(p);
        }
    }
    pts
}

fn unit(a: usize, rank: usize) -> Vec<usize> {
    let mut u = vec![0; rank];
    u[a] = 1;
    u
}

fn directed(from: &[Vec<usize>], to: &[Vec<usize>]) -> f64 {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| p.iter().zip(q).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / from.len() as f64
}

/// Confusion counts, Dice and averaged boundary distance by enumeration.
pub fn brute_metrics(pred: &LabelMask, gt: &LabelMask, class: u8) -> BruteMetrics {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        tp += (p == class && g == class) as u64;
        fp += (p == class && g != class) as u64;
        fn_ += (p != class && g == class) as u64;
    }
    let den = 2 * tp + fp + fn_;
    let dice = if den == 0 { 1.0 } else { 2.0 * tp as f64 / den as f64 };
    let (x, y) = (brute_boundary(gt, class), brute_boundary(pred, class));
    let hausdorff = (!x.is_empty() && !y.is_empty()).then(|| (directed(&x, &y) + directed(&y, &x)) / 2.0);
    BruteMetrics { tp, fp, fn_, dice, hausdorff }
}

pub fn brute_accuracy(pred: &LabelMask, gt: &LabelMask) -> f64 {
    let hits = pred.labels().iter().zip(gt.labels()).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}

/// Per-class IoU of probabilities thresholded strictly above `t`.
pub fn brute_iou(probs: &Tensor<f64>, gt: &LabelMask, t: f64) -> Vec<f64> {
    let c = probs.channels();
    (0..c)
        .map(|k| {
            let (mut i, mut u) = (0u64, 0u64);
            for (v, &g) in gt.labels().iter().enumerate() {
                let p = probs.data()[v * c + k] > t;
                let g = g as usize == k;
                i += (p && g) as u64;
                u += (p || g) as u64;
            }
            if u == 0 { 1.0 } else { i as f64 / u as f64 }
        })
        .collect()
}

/// Worst absolute error of the tape convolutions against the oracles over
/// `cases` random configurations, as `(binary64, binary32)`.
pub fn conv_oracle_errors(seed: u64, cases: usize) -> (f64, f64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut e64, mut e32) = (0.0f64, 0.0f64);
    for case in 0..cases {
        let rank = rng.random_range(2..=3);
        let transposed = case % 2 == 1;
        let stride = if transposed { 2 } else { rng.random_range(1..=2) };
        let mut xs = vec![rng.random_range(1..=2)];
        xs.extend((0..rank).map(|_| rng.random_range(2..=6)));
        let cin = rng.random_range(1..=4);
        xs.push(cin);
        let mut ks: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=3)).collect();
        if case % 10 == 4 {
            ks[rank - 1] = 7;
        }
        ks.extend([cin, rng.random_range(1..=4)]);
        let x = random_tensor::<f64, _>(&mut rng, &xs);
        let k = random_tensor::<f64, _>(&mut rng, &ks);
        let b = random_tensor::<f64, _>(&mut rng, &[ks[rank + 1]]);
        let want = if transposed {
            naive_conv_transpose(&x, &k, Some(b.data()), stride)
        } else {
            naive_conv(&x, &k, Some(b.data()), stride)
        };
        let got = tape_conv(x.clone(), k.clone(), b.clone(), stride, transposed);
        assert_eq!(got.shape(), want.shape());
        e64 = e64.max(got.max_abs_diff(&want));
        // binary32 path, checked against the oracle on the rounded inputs
        let (x32, k32, b32): (Tensor<f32>, Tensor<f32>, Tensor<f32>) = (x.cast(), k.cast(), b.cast());
        let b32d = b32.cast::<f64>();
        let want32 = if transposed {
            naive_conv_transpose(&x32.cast(), &k32.cast(), Some(b32d.data()), stride)
        } else {
            naive_conv(&x32.cast(), &k32.cast(), Some(b32d.data()), stride)
        };
        e32 = e32.max(tape_conv(x32, k32, b32, stride, transposed).max_abs_diff(&want32));
    }
    (e64, e32)
}

fn tape_conv<T: Element>(x: Tensor<T>, k: Tensor<T>, b: Tensor<T>, stride: usize, transposed: bool) -> Tensor<f64> {
    let mut tape = gseg::Tape::<T>::new();
    let (x, k, b) = (tape.leaf(x), tape.leaf(k), tape.leaf(b));
    let y = if transposed {
        tape.conv_transpose(x, k, Some(b), stride)
    } else {
        tape.conv(x, k, Some(b), stride)
    }
    .unwrap();
    tape.value(y).cast()
}

type Check = Result<String, String>;

fn fail<T>(msg: String) -> Result<T, String> {
    Err(msg)
}

/// Library metrics against enumeration on `pairs` random mask pairs.
pub fn metric_oracle(seed: u64, pairs: usize) -> Check {
    use gseg::metrics::{accuracy, hausdorff_avg_masks, iou_score, ConfusionCounts, IOU_THRESHOLD};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..pairs {
        let rank = rng.random_range(2..=3);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=8)).collect();
        let classes = rng.random_range(2..=4);
        let pred = random_mask(&mut rng, &shape, classes);
        let gt = random_mask(&mut rng, &shape, classes);
        for class in 0..4u8 {
            let want = brute_metrics(&pred, &gt, class);
            let c = ConfusionCounts::from_masks(&pred, &gt, class).unwrap();
            if (c.tp, c.fp, c.fn_) != (want.tp, want.fp, want.fn_) || c.dice() != want.dice {
                return fail(format!("case {case} class {class}: counts differ"));
            }
            let got = hausdorff_avg_masks(&pred, &gt, class).unwrap();
            match (got, want.hausdorff) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => return fail(format!("case {case} class {class}: boundary presence differs")),
            }
        }
        if accuracy(&pred, &gt).unwrap() != brute_accuracy(&pred, &gt) {
            return fail(format!("case {case}: accuracy differs"));
        }
        let mut probs_shape = shape.clone();
        probs_shape.push(4);
        let mut probs: Tensor<f64> = Tensor::from_fn(&probs_shape, |_| rng.random_range(0.0..1.0));
        // exact threshold values must land on the negative side
        probs.data_mut()[0] = IOU_THRESHOLD;
        let onehot: Tensor<f64> = gt.one_hot(4).unwrap();
        if iou_score(&probs, &onehot, IOU_THRESHOLD).unwrap().per_class != brute_iou(&probs, &gt, IOU_THRESHOLD) {
            return fail(format!("case {case}: IoU differs"));
        }
    }
    if worst > 1e-9 {
        return fail(format!("boundary distance error {worst:.3e}"));
    }
    Ok(format!("{pairs} pairs, counts exact, distance error {worst:.1e}"))
}

/// Slicing, fold and augmentation properties.
pub fn pipeline_properties(seed: u64) -> Check {
    use gseg::data::{
        apply_transform, expand_with_augmentation, generate_phantom, k_fold, preprocess, restack_slices, slices_2d,
        PhantomSpec, Transform,
    };
    use rand::SeedableRng;
    let sample = preprocess(&generate_phantom(&PhantomSpec::cube("p", 16, seed)).unwrap(), None).unwrap();
    let slices = slices_2d(&sample).unwrap();
    if slices.len() != sample.spatial()[2] {
        return fail(format!("{} slices for depth {}", slices.len(), sample.spatial()[2]));
    }
    if restack_slices("p", &slices).unwrap() != sample {
        return fail("restacked slices differ".into());
    }
    for n in 5..=50 {
        let plan = k_fold(n, 5, seed + n as u64).unwrap();
        let mut all: Vec<usize> = plan.folds.iter().flat_map(|f| f.test.iter().copied()).collect();
        all.sort_unstable();
        if all != (0..n).collect::<Vec<_>>() {
            return fail(format!("k_fold({n}, 5) is not a partition"));
        }
        for f in &plan.folds {
            if f.train.len() + f.test.len() != n || f.train.iter().any(|i| f.test.contains(i)) {
                return fail(format!("k_fold({n}, 5): train is not the complement"));
            }
        }
    }
    let involutions = [
        Transform::Flip { axis: 1 },
        Transform::Transpose { perm: vec![1, 0, 2] },
        Transform::Rot90 { k: 2, plane: (0, 2) },
    ];
    for t in &involutions {
        if apply_transform(&apply_transform(&sample, t).unwrap(), t).unwrap() != sample {
            return fail(format!("{t:?} is not an involution"));
        }
    }
    let quarter = Transform::Rot90 { k: 1, plane: (0, 1) };
    let mut r = sample.clone();
    for _ in 0..4 {
        r = apply_transform(&r, &quarter).unwrap();
    }
    let (fwd, back) = (Transform::CropPad { shift: vec![3, -2, 1] }, Transform::CropPad { shift: vec![-3, 2, -1] });
    if r != sample || apply_transform(&apply_transform(&sample, &fwd).unwrap(), &back).unwrap() != sample {
        return fail("rotation or shift inverse failed".into());
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for n in [1usize, 4, 10, 15, 25] {
        let set: Vec<_> = (0..n).map(|i| gseg::data::PreprocessedSample { id: format!("s{i}"), ..slices[i % slices.len()].clone() }).collect();
        let out = expand_with_augmentation(&set, 0.1, &mut rng).unwrap();
        let want = (0.1 * n as f64).round() as usize;
        if out.len() != n + want {
            return fail(format!("expansion of {n} added {} samples", out.len() - n));
        }
    }
    Ok("slices restack, k_fold partitions n=5..50, involutions hold, 10% expansion".into())
}

fn random_volume<R: Rng>(rng: &mut R, dtype: usize) -> gseg::nifti::NiftiVolume {
    use gseg::nifti::{NiftiVolume, VoxelData};
    let rank = rng.random_range(1..=4);
    let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=6)).collect();
    let n: usize = shape.iter().product();
    let data = match dtype {
        0 => VoxelData::U8((0..n).map(|_| rng.random()).collect()),
        1 => VoxelData::I16((0..n).map(|_| rng.random()).collect()),
        2 => VoxelData::F32((0..n).map(|_| rng.random_range(-1e3..1e3)).collect()),
        _ => VoxelData::F64((0..n).map(|_| rng.random_range(-1e6..1e6)).collect()),
    };
    NiftiVolume::new(&shape, data).unwrap()
}

/// Write/read identity over the four datatypes and both byte orders, then
/// `fuzz` random or mutated inputs that must never panic the parser.
pub fn nifti_round_trip(seed: u64, volumes: usize, fuzz: usize) -> Check {
    use gseg::nifti::{read_nifti, write_nifti, write_nifti_endian, Endian};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut valid = Vec::new();
    for i in 0..volumes {
        let vol = random_volume(&mut rng, i % 4);
        let endian = if i == volumes - 1 { Endian::Big } else { Endian::Little };
        let bytes = write_nifti_endian(&vol, endian);
        let back = read_nifti(&bytes).map_err(|e| format!("volume {i}: {e}"))?;
        if back.data != vol.data || back.shape() != vol.shape() {
            return fail(format!("volume {i} ({endian:?}) changed on round trip"));
        }
        if endian == Endian::Little && write_nifti(&back) != bytes {
            return fail(format!("volume {i} bytes changed on rewrite"));
        }
        valid.push(bytes);
    }
    let mut rejected = 0;
    for i in 0..fuzz {
        let bytes: Vec<u8> = if i % 2 == 0 {
            let len = rng.random_range(0..800);
            (0..len).map(|_| rng.random()).collect()
        } else {
            let mut b = valid[i % valid.len()].clone();
            for _ in 0..rng.random_range(1..8) {
                let at = rng.random_range(0..b.len());
                b[at] = rng.random();
            }
            b.truncate(rng.random_range(b.len() / 2..=b.len()));
            b
        };
        match std::panic::catch_unwind(|| read_nifti(&bytes)) {
            Ok(Err(_)) => rejected += 1,
            Ok(Ok(_)) => {}
            Err(_) => return fail(format!("parser panicked on fuzz input {i}")),
        }
    }
    Ok(format!("{volumes} volumes incl. big-endian, {fuzz} fuzz inputs ({rejected} rejected, 0 panics)"))
}
