//! Suffix array construction over integer token ids by prefix doubling with
//! radix (counting) sorts: O(n log n) time, a handful of `u32` arrays of
//! length n of extra memory.

/// Builds the suffix array of `text`, whose symbols are all `< alphabet`.
///
/// A suffix that is a proper prefix of another sorts first.
pub fn build(text: &[u32], alphabet: usize) -> Vec<u32> {
    let n = text.len();
    if n == 0 {
        return Vec::new();
    }
    assert!(n <= u32::MAX as usize, "text too long for u32 suffix array");

    let buckets = alphabet.max(n) + 1;
    let mut count = vec![0u32; buckets];
    let mut rank: Vec<u32> = vec![0; n];
    let mut sa: Vec<u32> = vec![0; n];

    // Initial order by first symbol.
    for &c in text {
        count[c as usize] += 1;
    }
    prefix_sums(&mut count);
    for i in (0..n).rev() {
        let r = text[i] as usize;
        count[r] -= 1;
        sa[count[r] as usize] = i as u32;
    }
    let mut r = 0u32;
    rank[sa[0] as usize] = 0;
    for j in 1..n {
        if text[sa[j] as usize] != text[sa[j - 1] as usize] {
            r += 1;
        }
        rank[sa[j] as usize] = r;
    }
    let mut distinct = r as usize + 1;
    if distinct == n {
        return sa;
    }

    let mut by_second: Vec<u32> = vec![0; n];
    let mut next_rank: Vec<u32> = vec![0; n];
    let mut k = 1usize;
    loop {
        // Order by the second key: suffixes with no second half come first,
        // then the rest in the order of their second half.
        let mut p = 0;
        for i in n.saturating_sub(k)..n {
            by_second[p] = i as u32;
            p += 1;
        }
        for &s in &sa {
            if s as usize >= k {
                by_second[p] = s - k as u32;
                p += 1;
            }
        }
        // Stable counting sort by the first key.
        count[..distinct + 1].iter_mut().for_each(|c| *c = 0);
        for &r in &rank {
            count[r as usize] += 1;
        }
        prefix_sums(&mut count[..distinct + 1]);
        for &s in by_second.iter().rev() {
            let r = rank[s as usize] as usize;
            count[r] -= 1;
            sa[count[r] as usize] = s;
        }

        // New ranks from (rank[i], rank[i + k]) pairs. A missing second half
        // compares smallest, so present halves are shifted up by one.
        let key = |i: usize| -> (u32, u32) {
            let second = if i + k < n { rank[i + k] + 1 } else { 0 };
            (rank[i], second)
        };
        next_rank[sa[0] as usize] = 0;
        let mut r = 0u32;
        for j in 1..n {
            if key(sa[j] as usize) != key(sa[j - 1] as usize) {
                r += 1;
            }
            next_rank[sa[j] as usize] = r;
        }
        std::mem::swap(&mut rank, &mut next_rank);
        distinct = r as usize + 1;
        if distinct == n {
            return sa;
        }
        k *= 2;
    }
}

fn prefix_sums(count: &mut [u32]) {
    let mut total = 0u32;
    for c in count.iter_mut() {
        total += *c;
        *c = total;
    }
}
