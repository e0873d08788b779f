use crate::world::NodeId;

#[derive(Clone, Debug, PartialEq)]
struct CachedRoute {
    /// Starts at the owning node.
    hops: Vec<NodeId>,
    last_used: u64,
}

/// Bounded path cache for source routing. Each stored route also yields
/// routes to every node along it. Least-recently-used routes are evicted
/// once `capacity` is reached.
#[derive(Clone, Debug)]
pub struct RouteCache {
    owner: NodeId,
    capacity: usize,
    routes: Vec<CachedRoute>,
    clock: u64,
    evictions: u64,
}

pub fn is_cycle_free(route: &[NodeId]) -> bool {
    route
        .iter()
        .enumerate()
        .all(|(i, n)| !route[i + 1..].contains(n))
}

impl RouteCache {
    pub fn new(owner: NodeId, capacity: usize) -> Self {
        RouteCache {
            owner,
            capacity: capacity.max(1),
            routes: Vec::new(),
            clock: 0,
            evictions: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Store `route`, which must start at the owner, have at least one hop,
    /// and be cycle-free. Returns false if it was rejected.
    pub fn insert(&mut self, route: &[NodeId]) -> bool {
        if route.len() < 2 || route[0] != self.owner || !is_cycle_free(route) {
            return false;
        }
        let now = self.tick();
        // a stored route that already covers this one as a prefix is enough
        if let Some(r) = self
            .routes
            .iter_mut()
            .find(|r| r.hops.len() >= route.len() && r.hops[..route.len()] == *route)
        {
            r.last_used = now;
            return true;
        }
        // drop stored routes this one extends
        self.routes
            .retain(|r| !(r.hops.len() < route.len() && route[..r.hops.len()] == r.hops[..]));
        if self.routes.len() >= self.capacity {
            let (idx, _) = self
                .routes
                .iter()
                .enumerate()
                .min_by_key(|(_, r)| r.last_used)
                .expect("non-empty at capacity");
            self.routes.remove(idx);
            self.evictions += 1;
        }
        self.routes.push(CachedRoute {
            hops: route.to_vec(),
            last_used: now,
        });
        true
    }

    /// Shortest cached route from the owner to `dest` (inclusive of both
    /// ends). Ties go to the most recently used route.
    pub fn find(&mut self, dest: NodeId) -> Option<Vec<NodeId>> {
        let best = self
            .routes
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.hops.iter().position(|&n| n == dest).map(|p| (i, p)))
            .filter(|&(_, p)| p > 0)
            .min_by(|a, b| {
                a.1.cmp(&b.1)
                    .then(self.routes[b.0].last_used.cmp(&self.routes[a.0].last_used))
            });
        let (idx, pos) = best?;
        let now = self.tick();
        self.routes[idx].last_used = now;
        Some(self.routes[idx].hops[..=pos].to_vec())
    }

    /// Non-mutating variant of [`find`](Self::find).
    pub fn peek(&self, dest: NodeId) -> Option<Vec<NodeId>> {
        self.routes
            .iter()
            .filter_map(|r| r.hops.iter().position(|&n| n == dest).map(|p| (r, p)))
            .filter(|&(_, p)| p > 0)
            .min_by(|a, b| a.1.cmp(&b.1).then(b.0.last_used.cmp(&a.0.last_used)))
            .map(|(r, p)| r.hops[..=p].to_vec())
    }

    /// Remove (truncate) every route using the directed link `from -> to`.
    /// Returns how many routes were affected.
    pub fn purge_link(&mut self, from: NodeId, to: NodeId) -> usize {
        let mut affected = 0;
        for r in &mut self.routes {
            if let Some(i) = r.hops.windows(2).position(|w| w[0] == from && w[1] == to) {
                r.hops.truncate(i + 1);
                affected += 1;
            }
        }
        self.routes.retain(|r| r.hops.len() >= 2);
        affected
    }

    pub fn routes(&self) -> impl Iterator<Item = &[NodeId]> {
        self.routes.iter().map(|r| r.hops.as_slice())
    }
}
