//! Independent reference models used by the integration and acceptance
//! tests. None of them touch the pipeline; they recompute expected values
//! from scenario inputs alone.

#![allow(dead_code)]

pub mod carousel {
    /// Compute farm parameters in milliseconds.
    #[derive(Debug, Clone, Copy)]
    pub struct Farm {
        pub workers: usize,
        pub proc_ms: u64,
        pub timeout_ms: Option<u64>,
        pub resubmit_ms: u64,
        pub max_attempts: u32,
    }

    #[derive(Debug, Clone, PartialEq, Eq)]
    pub struct Trace {
        pub attempts: Vec<u32>,
        pub start: Vec<Option<u64>>,
        /// Completion or abandonment time.
        pub finish: Vec<u64>,
        pub abandoned: Vec<bool>,
        /// When each file leaves disk; `None` means held to the end.
        pub release: Vec<Option<u64>>,
    }

    /// Time each job joins the worker queue, attempts used, and whether it
    /// gave up. Attempt `a` starts at `s`; input must land strictly before
    /// `s + timeout`, otherwise the next attempt starts `resubmit` later.
    fn admission(stage: u64, release_at: u64, farm: &Farm) -> (Option<u64>, u32, u64) {
        let mut s = release_at;
        let mut attempt = 1;
        loop {
            if stage <= s {
                return (Some(s), attempt, 0);
            }
            match farm.timeout_ms {
                None => return (Some(stage), attempt, 0),
                Some(t) if stage < s + t => return (Some(stage), attempt, 0),
                Some(t) => {
                    if attempt >= farm.max_attempts {
                        return (None, attempt, s + t);
                    }
                    s = s + t + farm.resubmit_ms;
                    attempt += 1;
                }
            }
        }
    }

    /// FIFO multi-server queue ordered by (ready time, file index).
    fn serve(ready: &[(u64, usize)], farm: &Farm, n: usize) -> (Vec<Option<u64>>, Vec<u64>) {
        let mut order = ready.to_vec();
        order.sort();
        let mut free = vec![0u64; farm.workers];
        let mut start = vec![None; n];
        let mut finish = vec![0; n];
        for (r, i) in order {
            let w = (0..free.len()).min_by_key(|&w| (free[w], w)).unwrap();
            let s = r.max(free[w]);
            free[w] = s + farm.proc_ms;
            start[i] = Some(s);
            finish[i] = s + farm.proc_ms;
        }
        (start, finish)
    }

    /// Each file released as a one-file job the moment it lands.
    pub fn file_level(stage: &[u64], farm: &Farm, prompt: bool) -> Trace {
        let n = stage.len();
        let ready: Vec<(u64, usize)> = stage.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let (start, finish) = serve(&ready, farm, n);
        Trace {
            attempts: vec![1; n],
            start,
            release: finish.iter().map(|&f| prompt.then_some(f)).collect(),
            finish,
            abandoned: vec![false; n],
        }
    }

    /// Every job released at t0; the cache is held to the end.
    pub fn dataset_level(stage: &[u64], farm: &Farm) -> Trace {
        let n = stage.len();
        let mut ready = Vec::new();
        let mut attempts = vec![0; n];
        let mut abandoned = vec![false; n];
        let mut gave_up = vec![0; n];
        for (i, &t) in stage.iter().enumerate() {
            let (r, a, g) = admission(t, 0, farm);
            attempts[i] = a;
            match r {
                Some(r) => ready.push((r, i)),
                None => {
                    abandoned[i] = true;
                    gave_up[i] = g;
                }
            }
        }
        let (start, mut finish) = serve(&ready, farm, n);
        for i in 0..n {
            if abandoned[i] {
                finish[i] = gave_up[i];
            }
        }
        Trace {
            attempts,
            start,
            finish,
            abandoned,
            release: vec![None; n],
        }
    }

    pub fn makespan(t: &Trace) -> u64 {
        t.finish.iter().copied().max().unwrap_or(0)
    }

    /// Occupancy at instant `at`: files on disk with stage <= at < release.
    fn level(stage: &[u64], sizes: &[u64], t: &Trace, end: u64, at: u64) -> u64 {
        (0..stage.len())
            .filter(|&i| stage[i] <= at && at < t.release[i].unwrap_or(end).min(end))
            .map(|i| sizes[i])
            .sum()
    }

    /// Peak occupancy, checking every stage and release instant against
    /// every file.
    pub fn peak(stage: &[u64], sizes: &[u64], t: &Trace) -> u64 {
        let end = makespan(t);
        stage
            .iter()
            .copied()
            .chain(t.release.iter().flatten().copied())
            .filter(|&at| at <= end)
            .map(|at| level(stage, sizes, t, end, at))
            .max()
            .unwrap_or(0)
    }

    /// Integral of occupancy over [0, makespan], in byte-seconds (floor).
    pub fn byte_seconds(stage: &[u64], sizes: &[u64], t: &Trace) -> u64 {
        let end = makespan(t);
        let byte_ms: u128 = (0..stage.len())
            .map(|i| {
                let gone = t.release[i].unwrap_or(end).min(end);
                sizes[i] as u128 * gone.saturating_sub(stage[i]) as u128
            })
            .sum();
        (byte_ms / 1000) as u64
    }

    pub fn mean_attempts(t: &Trace) -> f64 {
        if t.attempts.is_empty() {
            return 0.0;
        }
        t.attempts.iter().map(|&a| a as f64).sum::<f64>() / t.attempts.len() as f64
    }
}

pub mod dag {
    use std::collections::{BTreeMap, HashMap};

    /// Longest-path depth by memoised recursion over `(id, deps)` pairs;
    /// `None` on a cycle or an unknown dependency.
    pub fn depths(jobs: &[(String, Vec<String>)]) -> Option<BTreeMap<String, u32>> {
        let deps: HashMap<&str, &Vec<String>> = jobs.iter().map(|(id, d)| (id.as_str(), d)).collect();
        let mut memo = BTreeMap::new();
        fn go<'a>(
            id: &'a str,
            deps: &HashMap<&'a str, &'a Vec<String>>,
            memo: &mut BTreeMap<String, u32>,
            stack: &mut Vec<&'a str>,
        ) -> Option<u32> {
            if let Some(d) = memo.get(id) {
                return Some(*d);
            }
            if stack.contains(&id) {
                return None;
            }
            stack.push(id);
            let mut depth = 0;
            for d in deps.get(id)?.iter() {
                depth = depth.max(go(d, deps, memo, stack)? + 1);
            }
            stack.pop();
            memo.insert(id.to_string(), depth);
            Some(depth)
        }
        for (id, _) in jobs {
            go(id, &deps, &mut memo, &mut Vec::new())?;
        }
        Some(memo)
    }

    /// One job's life in an audit trace: position of its release and of
    /// its processed event, and how often each happened.
    #[derive(Debug, Default, Clone)]
    pub struct JobEvents {
        pub released: Vec<u64>,
        pub processed: Vec<u64>,
    }

    /// Checks a topological order: every job released and processed exactly
    /// once, and released only after all its dependencies were processed.
    /// Returns the first violation.
    pub fn check_order(jobs: &[(String, Vec<String>)], events: &BTreeMap<String, JobEvents>) -> Result<(), String> {
        for (id, deps) in jobs {
            let e = events.get(id).ok_or(format!("{id}: never seen"))?;
            if e.released.len() != 1 || e.processed.len() != 1 {
                return Err(format!(
                    "{id}: released {} times, processed {} times",
                    e.released.len(),
                    e.processed.len()
                ));
            }
            for d in deps {
                let p = events.get(d).and_then(|x| x.processed.first()).ok_or(format!("{d}: not processed"))?;
                if *p >= e.released[0] {
                    return Err(format!("{id} released at {} before {d} processed at {p}", e.released[0]));
                }
            }
        }
        Ok(())
    }
}

pub mod graphs {
    use std::collections::BTreeMap;

    /// Templates `0..n`, their entry flags, and branches `(source, dest,
    /// fires)` in declaration order. Predicates are the literals true/false.
    #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
    pub struct Graph {
        pub n: usize,
        pub entry: Vec<bool>,
        pub edges: Vec<(usize, usize, bool)>,
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for at in 0..n {
                let mut q = p.clone();
                q.insert(at, n - 1);
                out.push(q);
            }
        }
        out
    }

    impl Graph {
        fn relabel(&self, p: &[usize]) -> Graph {
            let mut entry = vec![false; self.n];
            for (i, e) in self.entry.iter().enumerate() {
                entry[p[i]] = *e;
            }
            let mut edges: Vec<_> = self.edges.iter().map(|&(s, d, f)| (p[s], p[d], f)).collect();
            edges.sort();
            Graph { n: self.n, entry, edges }
        }

        /// Smallest relabelling. Two graphs with the same canonical form
        /// produce the same multiset of template paths up to renaming.
        pub fn canonical(&self) -> Graph {
            self.canonical_among(&permutations(self.n))
        }

        fn canonical_among(&self, perms: &[Vec<usize>]) -> Graph {
            perms.iter().map(|p| self.relabel(p)).min().unwrap()
        }

        /// Kahn's algorithm over the firing edges only; `None` if they
        /// close a cycle.
        pub fn firing_order(&self) -> Option<Vec<usize>> {
            let mut indeg = vec![0usize; self.n];
            for &(_, d, f) in &self.edges {
                if f {
                    indeg[d] += 1;
                }
            }
            let mut ready: Vec<usize> = (0..self.n).filter(|&t| indeg[t] == 0).collect();
            let mut order = Vec::new();
            while let Some(t) = ready.pop() {
                order.push(t);
                for &(s, d, f) in &self.edges {
                    if f && s == t {
                        indeg[d] -= 1;
                        if indeg[d] == 0 {
                            ready.push(d);
                        }
                    }
                }
            }
            (order.len() == self.n).then_some(order)
        }

        /// The branches whose source an entry can reach through firing
        /// edges. Other branches never get evaluated.
        pub fn live(&self) -> Graph {
            let mut reach = self.entry.clone();
            loop {
                let mut changed = false;
                for &(s, d, f) in &self.edges {
                    if f && reach[s] && !reach[d] {
                        reach[d] = true;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
            Graph {
                n: self.n,
                entry: self.entry.clone(),
                edges: self.edges.iter().copied().filter(|&(s, _, _)| reach[s]).collect(),
            }
        }

        /// A reachable firing cycle, so only the caps stop instantiation.
        pub fn fires_forever(&self) -> bool {
            self.live().firing_order().is_none()
        }
    }

    /// One representative per relabelling class of every graph with
    /// `1..=max_n` templates, a non-empty entry set, and a multiset of at
    /// most `max_edges` branches.
    pub fn enumerate(max_n: usize, max_edges: usize) -> Vec<Graph> {
        fn multisets(options: &[(usize, usize, bool)], from: usize, left: usize, cur: &mut Vec<(usize, usize, bool)>, out: &mut Vec<Vec<(usize, usize, bool)>>) {
            out.push(cur.clone());
            if left == 0 {
                return;
            }
            for i in from..options.len() {
                cur.push(options[i]);
                multisets(options, i, left - 1, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        for n in 1..=max_n {
            let mut options = Vec::new();
            for s in 0..n {
                for d in 0..n {
                    options.push((s, d, false));
                    options.push((s, d, true));
                }
            }
            options.sort();
            let mut sets = Vec::new();
            multisets(&options, 0, max_edges, &mut Vec::new(), &mut sets);
            let perms = permutations(n);
            for mask in 1u32..(1 << n) {
                let entry: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
                for edges in &sets {
                    let g = Graph { n, entry: entry.clone(), edges: edges.clone() };
                    if g.canonical_among(&perms) == g {
                        out.push(g);
                    }
                }
            }
        }
        out
    }

    /// Multiset of template paths (entry first) of the Works a graph
    /// produces when no cap binds, by expanding templates in topological
    /// order. `None` for graphs that fire forever.
    pub fn works(g: &Graph) -> Option<BTreeMap<Vec<usize>, usize>> {
        let order = g.live().firing_order()?;
        let mut paths: Vec<Vec<Vec<usize>>> = vec![Vec::new(); g.n];
        for t in 0..g.n {
            if g.entry[t] {
                paths[t].push(vec![t]);
            }
        }
        for &t in &order {
            let here = paths[t].clone();
            for p in &here {
                for &(s, d, f) in &g.edges {
                    if f && s == t {
                        let mut q = p.clone();
                        q.push(d);
                        paths[d].push(q);
                    }
                }
            }
        }
        let mut out = BTreeMap::new();
        for p in paths.into_iter().flatten() {
            *out.entry(p).or_insert(0) += 1;
        }
        Some(out)
    }
}
