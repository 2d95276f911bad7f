use crate::volgrid::{linear_index, Dims};

/// Disjoint-set forest with union by size and path halving.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(len: usize) -> Self {
        Self {
            parent: (0..len).collect(),
            size: vec![1; len],
        }
    }

    pub fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    pub fn union(&mut self, a: usize, b: usize) -> usize {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return a;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
        a
    }
}

/// Connected components of a binary 3D mask under 6-connectivity.
#[derive(Debug, Clone)]
pub struct Components {
    /// Component id per voxel, 0 for background; ids start at 1 in scan order.
    pub labels: Vec<u32>,
    /// `sizes[id - 1]` is the voxel count of component `id`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Id of the largest component; ties go to the lowest id.
    pub fn largest(&self) -> Option<u32> {
        let mut best: Option<(usize, u32)> = None;
        for (i, &s) in self.sizes.iter().enumerate() {
            if best.map_or(true, |(bs, _)| s > bs) {
                best = Some((s, i as u32 + 1));
            }
        }
        best.map(|(_, id)| id)
    }

    pub fn mask_of(&self, id: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == id).collect()
    }
}

pub fn label_components(mask: &[bool], dims: Dims) -> Components {
    let [nx, ny, nz] = dims;
    let mut uf = UnionFind::new(mask.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = linear_index(dims, x, y, z);
                if !mask[i] {
                    continue;
                }
                if x > 0 && mask[i - 1] {
                    uf.union(i, i - 1);
                }
                if y > 0 && mask[i - nx] {
                    uf.union(i, i - nx);
                }
                if z > 0 && mask[i - nx * ny] {
                    uf.union(i, i - nx * ny);
                }
            }
        }
    }
    let mut id_of_root = vec![0u32; mask.len()];
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    for i in 0..mask.len() {
        if !mask[i] {
            continue;
        }
        let r = uf.find(i);
        if id_of_root[r] == 0 {
            sizes.push(0);
            id_of_root[r] = sizes.len() as u32;
        }
        let id = id_of_root[r];
        labels[i] = id;
        sizes[id as usize - 1] += 1;
    }
    Components { labels, sizes }
}

/// Keep only the largest 6-connected component of `mask`.
pub fn largest_component(mask: &[bool], dims: Dims) -> Vec<bool> {
    let cc = label_components(mask, dims);
    match cc.largest() {
        Some(id) => cc.mask_of(id),
        None => vec![false; mask.len()],
    }
}

/// Drop 8-connected in-plane blobs smaller than `min_area` pixels.
pub fn filter_small_blobs_2d(mask: &[bool], nx: usize, ny: usize, min_area: usize) -> Vec<bool> {
    if min_area <= 1 {
        return mask.to_vec();
    }
    let mut uf = UnionFind::new(mask.len());
    for y in 0..ny {
        for x in 0..nx {
            let i = x + nx * y;
            if !mask[i] {
                continue;
            }
            if x > 0 && mask[i - 1] {
                uf.union(i, i - 1);
            }
            if y > 0 {
                for dx in [-1isize, 0, 1] {
                    let xx = x as isize + dx;
                    if xx >= 0 && (xx as usize) < nx && mask[xx as usize + nx * (y - 1)] {
                        uf.union(i, xx as usize + nx * (y - 1));
                    }
                }
            }
        }
    }
    let mut size = vec![0usize; mask.len()];
    for i in 0..mask.len() {
        if mask[i] {
            let r = uf.find(i);
            size[r] += 1;
        }
    }
    (0..mask.len())
        .map(|i| mask[i] && size[uf.find(i)] >= min_area)
        .collect()
}
