/**
 * Card and comparison-table view models. Every cell is a formatted copy of a
 * response field (or a placeholder); the comparison table reproduces the
 * scenario / predicted flow / delta-vs-observed / delta-vs-reference layout
 * from card data alone.
 */

import { escapeHtml, fmtDelta, fmtFlow, fmtShare } from "./format.js";
import type { BoardState, ScenarioCard } from "./state.js";
import { referenceCard } from "./state.js";

export interface CardView {
  label: string;
  status: string;
  isBaseline: boolean;
  predicted: string;
  deltaObserved: string;
  marginalDecongestion: string;
  hypotheticalShare: string;
  error?: string;
}

export interface ComparisonRow {
  label: string;
  costReduction: number;
  predicted: string;
  deltaObserved: string;
  deltaReference: string;
}

export function cardView(card: ScenarioCard): CardView {
  const summary = card.response?.summary;
  return {
    label: card.label,
    status: card.status,
    isBaseline: card.request.cost_reduction === 0,
    predicted: summary ? fmtFlow(summary.predicted_mean) : "…",
    deltaObserved: summary ? summary.delta_from_observed : "…",
    marginalDecongestion: summary ? fmtFlow(summary.marginal_decongestion_mean) : "…",
    hypotheticalShare: summary ? fmtShare(summary.hypothetical_share) : "…",
    error: card.error,
  };
}

export function cardViews(state: BoardState): CardView[] {
  return state.cards.map(cardView);
}

export function comparisonRows(state: BoardState): ComparisonRow[] {
  const reference = referenceCard(state);
  return state.cards
    .filter((c) => c.status === "done" && c.response)
    .map((c) => {
      const summary = c.response!.summary;
      const isReference = reference !== null && c.label === reference.label;
      return {
        label: c.label,
        costReduction: summary.cost_reduction,
        predicted: fmtFlow(summary.predicted_mean),
        deltaObserved: summary.delta_from_observed,
        deltaReference: isReference ? "+0.0%" : fmtDelta(summary.delta_from_reference),
      };
    });
}

export function renderBoardHtml(state: BoardState): string {
  const cards = state.cards
    .map((card) => {
      const view = cardView(card);
      const badge = view.isBaseline ? '<span class="badge">baseline</span>' : "";
      if (card.status === "error") {
        return (
          `<article class="card error" data-label="${escapeHtml(view.label)}">` +
          `<h3>${escapeHtml(view.label)}${badge}</h3>` +
          `<p class="error-message">${escapeHtml(view.error ?? "request failed")}</p>` +
          `</article>`
        );
      }
      return (
        `<article class="card ${view.status}" data-label="${escapeHtml(view.label)}">` +
        `<h3>${escapeHtml(view.label)}${badge}</h3>` +
        `<dl>` +
        `<dt>predicted enrollment</dt><dd>${view.predicted}</dd>` +
        `<dt>vs observed</dt><dd>${escapeHtml(view.deltaObserved)}</dd>` +
        `<dt>marginal decongestion</dt><dd>${view.marginalDecongestion}</dd>` +
        `<dt>hypothetical share</dt><dd>${view.hypotheticalShare}</dd>` +
        `</dl>` +
        `</article>`
      );
    })
    .join("");

  const rows = comparisonRows(state)
    .map(
      (row) =>
        `<tr><td>${escapeHtml(row.label)}</td><td class="num">${row.predicted}</td>` +
        `<td class="num">${escapeHtml(row.deltaObserved)}</td>` +
        `<td class="num">${escapeHtml(row.deltaReference)}</td></tr>`
    )
    .join("");
  const table =
    `<table class="comparison"><thead><tr>` +
    `<th>scenario</th><th>predicted flow</th><th>Δ from observed</th><th>Δ from reference</th>` +
    `</tr></thead><tbody>${rows}</tbody></table>`;
  return `<section class="board">${cards}</section>${table}`;
}
