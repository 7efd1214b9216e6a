/**
 * Wire types mirroring the /v1 API responses field-for-field.
 * The client never re-derives numbers from these; it only formats them.
 */

export interface ScenarioRequest {
  label: string;
  cost_reduction: number;
  slot_scale: number | Record<string, number>;
  seeds?: number[];
  seed_count?: number;
  reference_run_id?: string | null;
}

export interface SummaryRow {
  label: string;
  cost_reduction: number;
  predicted_mean: number;
  sd: number;
  observed_total: number;
  delta_from_observed: string;
  delta_from_reference: string | null;
  marginal_decongestion_mean: number;
  hypothetical_share: number;
}

export interface DestinationEntry {
  dest_id: string;
  phi: number;
  observed_b: number;
  slots: number;
  y_mean: number;
  y_sd: number;
  y_p2_5: number;
  y_p97_5: number;
  d_total_mean: number;
  d_marg_mean: number;
  existing_share: number;
  classification: string;
}

export interface ScenarioResponse {
  run_id: string;
  summary: SummaryRow;
  top_destinations: DestinationEntry[];
  classification_counts: Record<string, number>;
  system: Record<string, unknown>;
}

export interface SystemSummary {
  schools: { origins: number; esc_destinations: number; public_destinations: number };
  regions: string[];
  od_pairs: number;
  observed_total: number;
  candidate_pool_total: number;
  slot_total: number;
  demand_supply_ratio: number | null;
  demand_supply_display: string;
  congested_public_schools: number;
  congested_feeding_origins: number;
  subsidy_baseline: number;
}

export interface RunStats {
  mean: number;
  sd: number;
  "p2.5": number;
  "p97.5": number;
}

export interface RunDestination {
  phi: number;
  observed_b: number;
  slots: number;
  Y: RunStats;
  D_total: RunStats;
  D_marg: RunStats;
  classification: string;
}

export interface RunSplit {
  Y_existing_mean: number;
  Y_hypothetical_mean: number;
  existing_share: number;
  hypothetical_share: number;
  D_total_existing_mean: number;
  D_total_hypothetical_mean: number;
  D_marg_existing_mean: number;
  D_marg_hypothetical_mean: number;
}

export interface RunDetail {
  run_id: string;
  scenario: { label: string; cost_reduction: number };
  R: number;
  mode: string;
  observed_total: number;
  allocation: {
    system: { Y: RunStats; D_total: RunStats; D_marg: RunStats };
    per_destination: Record<string, RunDestination>;
    classification_counts: Record<string, number>;
  };
  decomposition: {
    per_destination: Record<string, RunSplit>;
    system: Record<string, unknown>;
  };
}
