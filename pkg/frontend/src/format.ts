/**
 * Display formatting. Every function maps one response field to a string;
 * none of them combines fields, so all arithmetic stays on the server.
 */

export function fmtFlow(value: number): string {
  return Math.round(value).toLocaleString("en-US");
}

export function fmtFlow1(value: number): string {
  return value.toLocaleString("en-US", { minimumFractionDigits: 1, maximumFractionDigits: 1 });
}

/** Fractions arrive as 0..1; percent display with one decimal. */
export function fmtShare(fraction: number): string {
  return `${(fraction * 100).toFixed(1)}%`;
}

export function fmtPhi(value: number): string {
  return value.toFixed(3);
}

/** Server-computed delta strings pass through; missing means "no reference". */
export function fmtDelta(value: string | null | undefined): string {
  return value ?? "—";
}

export function fmtBand(lo: number, hi: number): string {
  return `[${fmtFlow1(lo)}, ${fmtFlow1(hi)}]`;
}

export function fmtPesosThousands(value: number): string {
  return `₱${(value * 1000).toLocaleString("en-US")}`;
}

export function escapeHtml(value: unknown): string {
  return String(value ?? "")
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}
