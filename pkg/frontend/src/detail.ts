/**
 * Per-destination table for one run: phi, enrollment with its percentile
 * band, both decongestion measures and the existing/hypothetical split.
 * Values map 1:1 onto /v1/runs/{id} fields; sorting only reorders rows.
 */

import { escapeHtml, fmtBand, fmtFlow1, fmtPhi, fmtShare } from "./format.js";
import type { RunDetail } from "./types.js";

export interface DetailRow {
  destId: string;
  phi: string;
  yMean: string;
  yBand: string;
  dTotal: string;
  dMarg: string;
  existingShare: string;
  hypotheticalShare: string;
  classification: string;
}

export type DetailSortKey = "dest_id" | "phi" | "y_mean" | "d_total" | "d_marg";

const SORT_ACCESSORS: Record<DetailSortKey, (detail: RunDetail, destId: string) => number | string> = {
  dest_id: (_detail, destId) => destId,
  phi: (detail, destId) => detail.allocation.per_destination[destId].phi,
  y_mean: (detail, destId) => detail.allocation.per_destination[destId].Y.mean,
  d_total: (detail, destId) => detail.allocation.per_destination[destId].D_total.mean,
  d_marg: (detail, destId) => detail.allocation.per_destination[destId].D_marg.mean,
};

export function detailRows(
  detail: RunDetail,
  sortKey: DetailSortKey = "d_marg",
  descending = true
): DetailRow[] {
  const ids = Object.keys(detail.allocation.per_destination);
  const accessor = SORT_ACCESSORS[sortKey];
  ids.sort((a, b) => {
    const va = accessor(detail, a);
    const vb = accessor(detail, b);
    const cmp = va < vb ? -1 : va > vb ? 1 : a.localeCompare(b);
    return descending ? -cmp : cmp;
  });
  return ids.map((destId) => {
    const entry = detail.allocation.per_destination[destId];
    const split = detail.decomposition.per_destination[destId];
    return {
      destId,
      phi: fmtPhi(entry.phi),
      yMean: fmtFlow1(entry.Y.mean),
      yBand: fmtBand(entry.Y["p2.5"], entry.Y["p97.5"]),
      dTotal: fmtFlow1(entry.D_total.mean),
      dMarg: fmtFlow1(entry.D_marg.mean),
      existingShare: fmtShare(split.existing_share),
      hypotheticalShare: fmtShare(split.hypothetical_share),
      classification: entry.classification,
    };
  });
}

export function renderDetailHtml(
  detail: RunDetail,
  sortKey: DetailSortKey = "d_marg",
  descending = true
): string {
  const rows = detailRows(detail, sortKey, descending)
    .map(
      (row) =>
        `<tr><td>${escapeHtml(row.destId)}</td>` +
        `<td class="num">${row.phi}</td>` +
        `<td class="num">${row.yMean}</td>` +
        `<td class="num">${row.yBand}</td>` +
        `<td class="num">${row.dTotal}</td>` +
        `<td class="num">${row.dMarg}</td>` +
        `<td class="num">${row.existingShare} / ${row.hypotheticalShare}</td>` +
        `<td>${escapeHtml(row.classification)}</td></tr>`
    )
    .join("");
  return (
    `<table class="detail" data-run="${escapeHtml(detail.run_id)}"><thead><tr>` +
    `<th>school</th><th>φ</th><th>enrollment</th><th>95% band</th>` +
    `<th>total decongestion</th><th>marginal</th><th>existing / new routes</th><th>class</th>` +
    `</tr></thead><tbody>${rows}</tbody></table>`
  );
}

export function renderNotFoundHtml(runId: string): string {
  return `<p class="not-found">run “${escapeHtml(runId)}” not found</p>`;
}
