use super::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Component {
    /// 1-based label, in output order.
    pub label: u32,
    pub size: usize,
    /// Smallest linear index belonging to the component.
    pub first_index: usize,
}

/// Face-connected (6-neighbor) labeling. `labels[idx]` is 0 for background.
/// Components are ordered by size, descending, ties broken by first voxel.
#[derive(Debug, Clone)]
pub struct Labeling {
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

impl Labeling {
    /// Mask of the voxels carrying `label`.
    pub fn mask_of(&self, template: &BinaryMask, label: u32) -> BinaryMask {
        let bits = self.labels.iter().map(|&l| l == label).collect();
        BinaryMask::new(template.grid().clone(), bits).expect("same size")
    }
}

pub fn connected_components(mask: &BinaryMask) -> Labeling {
    let grid = mask.grid();
    let [nx, ny, nz] = grid.dims();
    let bits = mask.bits();
    let mut labels = vec![0u32; bits.len()];
    let mut found: Vec<Component> = Vec::new();
    let mut stack = Vec::new();
    let plane = nx * ny;

    for start in 0..bits.len() {
        if !bits[start] || labels[start] != 0 {
            continue;
        }
        let label = found.len() as u32 + 1;
        labels[start] = label;
        stack.push(start);
        let mut size = 0;
        while let Some(idx) = stack.pop() {
            size += 1;
            let i = idx % nx;
            let j = (idx / nx) % ny;
            let k = idx / plane;
            let mut visit = |n: usize| {
                if bits[n] && labels[n] == 0 {
                    labels[n] = label;
                    stack.push(n);
                }
            };
            if i > 0 {
                visit(idx - 1);
            }
            if i + 1 < nx {
                visit(idx + 1);
            }
            if j > 0 {
                visit(idx - nx);
            }
            if j + 1 < ny {
                visit(idx + nx);
            }
            if k > 0 {
                visit(idx - plane);
            }
            if k + 1 < nz {
                visit(idx + plane);
            }
        }
        found.push(Component {
            label,
            size,
            first_index: start,
        });
    }

    // Discovery order is by first index already; a stable sort keeps it as
    // the tie-break.
    found.sort_by_key(|c| std::cmp::Reverse(c.size));
    let mut remap = vec![0u32; found.len() + 1];
    for (pos, c) in found.iter_mut().enumerate() {
        remap[c.label as usize] = pos as u32 + 1;
        c.label = pos as u32 + 1;
    }
    for l in labels.iter_mut() {
        *l = remap[*l as usize];
    }
    Labeling {
        labels,
        components: found,
    }
}

/// The largest 6-connected component, or an empty mask.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let lab = connected_components(mask);
    if lab.components.is_empty() {
        return mask.clone();
    }
    lab.mask_of(mask, 1)
}
