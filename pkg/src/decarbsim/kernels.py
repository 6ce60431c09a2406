"""Per-second simulation kernels.

Lane occupancy is a ring buffer per lane (``q[lane, slot]``) holding vehicle
indices front to back. All kernels take flat arrays so they compile under
numba; with numba disabled they run as plain Python loops, except the
element-wise IDM law which has a vectorised numpy twin.
"""

import numpy as np

from ._jit import USE_NUMBA, jit

NO_LEADER = 1e9
S_EPS = 0.01

# vehicle status codes
PENDING, WAITING, ACTIVE, ARRIVED = 0, 1, 2, 3


@jit
def _idm_loop(v, v0, gap, dv, T, s0, amax, b, bmax, active):
    n = v.shape[0]
    out = np.zeros(n)
    for i in range(n):
        if not active[i]:
            continue
        free = 1.0 - (v[i] / v0[i]) ** 4
        if gap[i] >= NO_LEADER:
            a = amax[i] * free
        elif gap[i] <= 0.0:
            a = -bmax
        else:
            dyn = v[i] * T[i] + v[i] * dv[i] / (2.0 * np.sqrt(amax[i] * b[i]))
            s_star = s0[i] + max(0.0, dyn)
            a = amax[i] * (free - (s_star / gap[i]) ** 2)
        out[i] = max(a, -bmax)
    return out


def _idm_numpy(v, v0, gap, dv, T, s0, amax, b, bmax, active):
    free = 1.0 - (v / v0) ** 4
    has_leader = gap < NO_LEADER
    safe_gap = np.where(gap > 0.0, gap, 1.0)
    s_star = s0 + np.maximum(0.0, v * T + v * dv / (2.0 * np.sqrt(amax * b)))
    inter = np.where(has_leader, (s_star / safe_gap) ** 2, 0.0)
    a = amax * (free - inter)
    a = np.where(has_leader & (gap <= 0.0), -bmax, a)
    return np.where(active, np.maximum(a, -bmax), 0.0)


idm_accel_array = _idm_loop if USE_NUMBA else _idm_numpy


@jit
def gate_kernel(t, q, q_head, q_cnt, lane_link, link_len, link_to, link_lane0, link_lanes, blocked,
                reserved, node_grants, node_cap, pos, speed, vlen, s0, bcomf, granted, glane, held,
                route, rlen, ridx, grant_time, grant_min, sight):
    """Grant lane heads passage through their downstream intersection.

    Lanes are visited in an order rotated by ``t`` so no approach has
    permanent priority. A grant needs intersection capacity this second and
    a downstream lane with room for the vehicle (space already promised to
    other granted vehicles counts as taken). Heads within ``sight`` metres
    whose next link is full are flagged in ``held``.
    """
    nl = q.shape[0]
    cap = q.shape[1]
    node_grants[:] = 0
    for k in range(nl):
        lane = (t + k) % nl
        if q_cnt[lane] == 0:
            continue
        h = q[lane, q_head[lane]]
        held[h] = 0
        if granted[h]:
            continue
        link = lane_link[lane]
        if ridx[h] >= rlen[h] - 1:
            granted[h] = 1
            glane[h] = -1
            continue
        d = link_len[link] - pos[h]
        if d > sight:
            continue
        nxt = route[h, ridx[h] + 1]
        if blocked[nxt]:
            held[h] = 1
            continue
        best = -1
        best_space = -1.0
        for j in range(link_lanes[nxt]):
            dl = link_lane0[nxt] + j
            if q_cnt[dl] > 0:
                tail = q[dl, (q_head[dl] + q_cnt[dl] - 1) % cap]
                space = pos[tail] - vlen[tail] - reserved[dl]
            else:
                space = link_len[nxt] - reserved[dl]
            if space > best_space:
                best_space = space
                best = dl
        need = vlen[h] + s0[h]
        if best < 0 or best_space < need:
            held[h] = 1
            continue
        v = speed[h]
        if d > max(grant_min, v * grant_time + v * v / (2.0 * bcomf[h])):
            continue
        node = link_to[link]
        if node_grants[node] >= node_cap:
            continue
        granted[h] = 1
        glane[h] = best
        reserved[best] += need
        node_grants[node] += 1


@jit
def leaders_kernel(q, q_head, q_cnt, lane_link, link_len, link_ffs, pos, speed, vlen, s0, granted, glane, held,
                   route, ridx, next_speed, gap, lead_v, target, tdist):
    """Gap and leader speed for every vehicle on the network.

    A head that holds no grant sees a stopped obstacle at the stop line; a
    granted head follows the tail of its reserved downstream lane. ``target``
    and ``tdist`` carry the slower speed ahead (NaN when none) for the
    eco-driving look-ahead; a stop line counts only when the head is
    ``held`` by a full downstream link.
    """
    nl = q.shape[0]
    cap = q.shape[1]
    for lane in range(nl):
        n = q_cnt[lane]
        if n == 0:
            continue
        link = lane_link[lane]
        L = link_len[link]
        for i in range(n):
            veh = q[lane, (q_head[lane] + i) % cap]
            target[veh] = np.nan
            tdist[veh] = 0.0
            if i == 0:
                if granted[veh]:
                    dl = glane[veh]
                    if dl < 0:
                        gap[veh] = NO_LEADER
                        lead_v[veh] = speed[veh]
                        continue
                    if q_cnt[dl] > 0:
                        tail = q[dl, (q_head[dl] + q_cnt[dl] - 1) % cap]
                        gap[veh] = (L - pos[veh]) + (pos[tail] - vlen[tail])
                        lead_v[veh] = speed[tail]
                    else:
                        gap[veh] = NO_LEADER
                        lead_v[veh] = speed[veh]
                    nxt = route[veh, ridx[veh] + 1]
                    ns = next_speed[nxt]
                    if ns < speed[veh]:
                        target[veh] = ns
                        tdist[veh] = L - pos[veh]
                else:
                    gap[veh] = L - pos[veh]
                    lead_v[veh] = 0.0
                    if held[veh]:
                        target[veh] = 0.0
                        tdist[veh] = L - pos[veh] - s0[veh]
            else:
                lead = q[lane, (q_head[lane] + i - 1) % cap]
                gap[veh] = pos[lead] - vlen[lead] - pos[veh]
                lead_v[veh] = speed[lead]
                if speed[lead] < speed[veh]:
                    target[veh] = speed[lead]
                    tdist[veh] = gap[veh] - s0[veh]


@jit
def integrate_kernel(t, q, q_head, q_cnt, lane_link, link_len, pos, speed, acc, vlen, s0, status,
                     link_of, lane_of, granted, glane, reserved, route, rlen, ridx, odo, arr_time,
                     prev_v, disp, start_link, veh_sec, dist_acc, crossed, n_crossed, clamps):
    """Ballistic update, stop-line/leader safety clamps and link transfers.

    Lanes are advanced front to back so every follower is clamped against
    its leader's new position. Vehicles past their link end are then
    transferred (or retired at their destination) in vehicle-id order.
    Returns the number of vehicles that arrived this second.
    """
    nl = q.shape[0]
    cap = q.shape[1]
    n_crossed[0] = 0
    for lane in range(nl):
        n = q_cnt[lane]
        if n == 0:
            continue
        link = lane_link[lane]
        L = link_len[link]
        for i in range(n):
            veh = q[lane, (q_head[lane] + i) % cap]
            v = speed[veh]
            a = acc[veh]
            if v + a < 0.0:
                dx = v * v / (-2.0 * a) if a < 0.0 else 0.0
                vn = 0.0
            else:
                dx = v + 0.5 * a
                vn = v + a
            x = pos[veh] + dx
            if i == 0:
                if not granted[veh] and x > L - S_EPS:
                    x = max(pos[veh], L - S_EPS)
                    vn = 0.0
                    clamps[0] += 1
            else:
                lead = q[lane, (q_head[lane] + i - 1) % cap]
                limit = pos[lead] - vlen[lead] - S_EPS
                if x > limit:
                    x = max(pos[veh], limit)
                    vn = min(vn, speed[lead])
                    clamps[0] += 1
                if x > L - S_EPS:
                    x = max(pos[veh], L - S_EPS)
                    clamps[0] += 1
            start_link[veh] = link
            veh_sec[link] += 1.0
            disp[veh] = x - pos[veh]
            pos[veh] = x
            speed[veh] = vn
            if x >= L:
                crossed[n_crossed[0]] = veh
                n_crossed[0] += 1
            else:
                dist_acc[link] += disp[veh]
                odo[veh] += disp[veh]

    # transfers in vehicle-id order
    m = n_crossed[0]
    order = np.sort(crossed[:m])
    arrived = 0
    for k in range(m):
        veh = order[k]
        link = link_of[veh]
        lane = lane_of[veh]
        L = link_len[link]
        over = pos[veh] - L
        if glane[veh] < 0:
            # destination reached
            q_head[lane] = (q_head[lane] + 1) % cap
            q_cnt[lane] -= 1
            disp[veh] -= over
            dist_acc[link] += disp[veh]
            status[veh] = ARRIVED
            arr_time[veh] = t + 1
            link_of[veh] = -1
            odo[veh] += disp[veh]
            arrived += 1
            continue
        dl = glane[veh]
        newx = over
        if q_cnt[dl] > 0:
            tail = q[dl, (q_head[dl] + q_cnt[dl] - 1) % cap]
            newx = min(newx, pos[tail] - vlen[tail] - S_EPS)
        if newx < 0.0:
            # downstream entry still occupied: hold at the stop line
            disp[veh] -= pos[veh] - (L - S_EPS)
            pos[veh] = L - S_EPS
            speed[veh] = 0.0
            dist_acc[link] += disp[veh]
            odo[veh] += disp[veh]
            clamps[0] += 1
            continue
        q_head[lane] = (q_head[lane] + 1) % cap
        q_cnt[lane] -= 1
        q[dl, (q_head[dl] + q_cnt[dl]) % cap] = veh
        q_cnt[dl] += 1
        reserved[dl] = max(0.0, reserved[dl] - (vlen[veh] + s0[veh]))
        disp[veh] = disp[veh] - over + newx
        dist_acc[link] += disp[veh] - newx
        nl_link = lane_link[dl]
        dist_acc[nl_link] += newx
        odo[veh] += disp[veh]
        pos[veh] = newx
        link_of[veh] = nl_link
        lane_of[veh] = dl
        ridx[veh] += 1
        granted[veh] = 0
        glane[veh] = -1

    return arrived


@jit
def enter_kernel(link, lane0, nlanes, q, q_head, q_cnt, reserved, pos, vlen, speed, link_len, s0_new):
    """Pick the entry lane with most room; -1 when none fits."""
    cap = q.shape[1]
    best = -1
    best_space = -1.0
    for j in range(nlanes):
        dl = lane0 + j
        if q_cnt[dl] >= cap - 1:
            continue
        if q_cnt[dl] > 0:
            tail = q[dl, (q_head[dl] + q_cnt[dl] - 1) % cap]
            space = pos[tail] - vlen[tail] - reserved[dl]
        else:
            space = link_len[link] - reserved[dl]
        if space > best_space:
            best_space = space
            best = dl
    if best >= 0 and best_space >= s0_new:
        return best
    return -1


# -- shortest paths ------------------------------------------------------------


@jit
def reverse_dijkstra(n_nodes, link_from, in_ptr, in_idx, cost, dest, dist, hops, next_link):
    """Shortest paths from every node to ``dest``.

    Labels are compared as (cost, hop count, first link index); the third
    key makes the chosen path lexicographically smallest among all optimal
    paths with the fewest links. O(V^2) scan, fine for city-sized graphs.
    """
    inf = np.inf
    for u in range(n_nodes):
        dist[u] = inf
        hops[u] = 1 << 30
        next_link[u] = -1
    done = np.zeros(n_nodes, dtype=np.bool_)
    dist[dest] = 0.0
    hops[dest] = 0
    for _ in range(n_nodes):
        best = -1
        for u in range(n_nodes):
            if done[u] or dist[u] == inf:
                continue
            if best < 0 or dist[u] < dist[best] or (dist[u] == dist[best] and hops[u] < hops[best]):
                best = u
        if best < 0:
            break
        done[best] = True
        for k in range(in_ptr[best], in_ptr[best + 1]):
            l = in_idx[k]
            u = link_from[l]
            if done[u]:
                continue
            d = cost[l] + dist[best]
            h = hops[best] + 1
            if d < dist[u] or (d == dist[u] and (h < hops[u] or (h == hops[u] and l < next_link[u]))):
                dist[u] = d
                hops[u] = h
                next_link[u] = l


@jit
def next_hop_table(n_nodes, link_from, in_ptr, in_idx, cost, dests, out_next, out_dist):
    dist = np.empty(n_nodes)
    hops = np.empty(n_nodes, dtype=np.int64)
    nxt = np.empty(n_nodes, dtype=np.int64)
    for k in range(dests.shape[0]):
        reverse_dijkstra(n_nodes, link_from, in_ptr, in_idx, cost, dests[k], dist, hops, nxt)
        out_next[k, :] = nxt
        out_dist[k, :] = dist
