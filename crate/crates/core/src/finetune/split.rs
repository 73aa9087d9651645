use rand::seq::SliceRandom;
use rand::Rng;

/// Index sets of a train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class 80/10/10 split of item indices by label.
pub fn stratified_split<R: Rng>(labels: &[usize], rng: &mut R) -> Split {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let n = idx.len();
        let n_test = n / 10;
        let n_val = n / 10;
        split.test.extend_from_slice(&idx[..n_test]);
        split.val.extend_from_slice(&idx[n_test..n_test + n_val]);
        split.train.extend_from_slice(&idx[n_test + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

/// Random 80/10/10 split of `n` items.
pub fn random_split<R: Rng>(n: usize, rng: &mut R) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_test = n / 10;
    let n_val = n / 10;
    let mut split = Split {
        test: idx[..n_test].to_vec(),
        val: idx[n_test..n_test + n_val].to_vec(),
        train: idx[n_test + n_val..].to_vec(),
    };
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

/// Keeps `floor(fraction * |items|)` items, allocated to classes in
/// proportion to their counts (largest remainder), sampled randomly within
/// each class.
pub fn stratified_subsample<R: Rng>(items: &[usize], labels: &[usize], fraction: f64, rng: &mut R) -> Vec<usize> {
    let target = (fraction * items.len() as f64).floor() as usize;
    let n_classes = items.iter().map(|&i| labels[i] + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for &i in items {
        by_class[labels[i]].push(i);
    }
    let exact: Vec<f64> = by_class.iter().map(|c| fraction * c.len() as f64).collect();
    let mut take: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(take.iter().sum());
    for &c in order.iter().cycle().take(n_classes * 2) {
        if missing == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            missing -= 1;
        }
    }
    let mut out = Vec::with_capacity(target);
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(rng);
        out.extend_from_slice(&members[..take[c]]);
    }
    out.sort_unstable();
    out
}

/// Keeps `floor(fraction * |items|)` items uniformly at random.
pub fn subsample<R: Rng>(items: &[usize], fraction: f64, rng: &mut R) -> Vec<usize> {
    let target = (fraction * items.len() as f64).floor() as usize;
    let mut v = items.to_vec();
    v.shuffle(rng);
    v.truncate(target);
    v.sort_unstable();
    v
}
