/**
 * Browser wiring: sliders in, cards out. All state flows through the board
 * reducer; in-flight runs are allowed and settle through completion events.
 */

import { ScenarioApi, ApiError } from "./api.js";
import { renderBoardHtml } from "./board.js";
import { renderDetailHtml, renderNotFoundHtml } from "./detail.js";
import { fmtFlow } from "./format.js";
import type { BoardEvent, BoardState } from "./state.js";
import { buildBoard, referenceCard } from "./state.js";
import type { ScenarioRequest, SystemSummary } from "./types.js";

const $ = <T extends HTMLElement>(selector: string): T => {
  const node = document.querySelector<T>(selector);
  if (!node) throw new Error(`missing element ${selector}`);
  return node;
};

const events: BoardEvent[] = [];
let board: BoardState = buildBoard(events);
const runIds = new Map<string, string>(); // card label -> run id

function dispatch(event: BoardEvent): void {
  events.push(event);
  board = buildBoard(events);
  renderBoard();
}

function renderBoard(): void {
  $("#board-root").innerHTML = renderBoardHtml(board);
  document.querySelectorAll<HTMLElement>("#board-root .card.done").forEach((node) => {
    node.addEventListener("click", () => {
      const label = node.dataset.label;
      if (label) void showDetail(label);
    });
  });
}

function api(): ScenarioApi {
  return new ScenarioApi(($("#base-url") as HTMLInputElement).value || "http://127.0.0.1:8000");
}

function renderSystem(system: SystemSummary): void {
  $("#system-line").textContent =
    `${system.schools.origins} origins · ${system.schools.esc_destinations} subsidized schools · ` +
    `${fmtFlow(system.candidate_pool_total)} candidates for ${fmtFlow(system.slot_total)} slots ` +
    `(${system.demand_supply_display}) · ${system.congested_public_schools} congested public schools`;
  const container = $("#region-scales");
  container.innerHTML = system.regions
    .map(
      (region) =>
        `<label>slots × ${region}` +
        `<input type="range" class="region-scale" data-region="${region}" min="0" max="3" step="0.1" value="1">` +
        `<output>1.0</output></label>`
    )
    .join("");
  container.querySelectorAll<HTMLInputElement>("input.region-scale").forEach((input) => {
    input.addEventListener("input", () => {
      (input.nextElementSibling as HTMLOutputElement).value = Number(input.value).toFixed(1);
    });
  });
}

function currentRequest(): ScenarioRequest {
  const deltaOverride = ($("#delta-override") as HTMLInputElement).value.trim();
  const delta = deltaOverride ? Number(deltaOverride) : Number(($("#delta") as HTMLInputElement).value);
  if (!Number.isFinite(delta) || delta < 0) {
    throw new Error("cost reduction must be a non-negative number (thousands of pesos)");
  }
  const scales: Record<string, number> = {};
  document.querySelectorAll<HTMLInputElement>("input.region-scale").forEach((input) => {
    scales[input.dataset.region!] = Number(input.value);
  });
  const allOne = Object.values(scales).every((v) => v === 1);
  const labelInput = ($("#label") as HTMLInputElement).value.trim();
  const label = labelInput || (delta === 0 ? "baseline" : `-${delta}K`);
  const reference = referenceCard(board);
  return {
    label,
    cost_reduction: delta,
    slot_scale: allOne ? 1.0 : scales,
    seed_count: Number(($("#seed-count") as HTMLInputElement).value) || 100,
    reference_run_id: reference && runIds.has(reference.label) ? runIds.get(reference.label) : null,
  };
}

async function launch(): Promise<void> {
  let request: ScenarioRequest;
  try {
    request = currentRequest();
  } catch (error) {
    $("#form-error").textContent = (error as Error).message;
    return;
  }
  $("#form-error").textContent = "";
  dispatch({ kind: "launched", request });
  try {
    const response = await api().runScenario(request);
    runIds.set(request.label, response.run_id);
    dispatch({ kind: "completed", label: request.label, response });
  } catch (error) {
    const message = error instanceof ApiError ? `${error.status}: ${error.message}` : String(error);
    dispatch({ kind: "failed", label: request.label, message });
  }
}

async function showDetail(label: string): Promise<void> {
  const runId = runIds.get(label);
  const root = $("#detail-root");
  if (!runId) {
    root.innerHTML = renderNotFoundHtml(label);
    return;
  }
  try {
    const detail = await api().runDetail(runId);
    root.innerHTML = renderDetailHtml(detail);
  } catch (error) {
    if (error instanceof ApiError && error.status === 404) {
      root.innerHTML = renderNotFoundHtml(runId);
    } else {
      root.innerHTML = `<p class="not-found">${String(error)}</p>`;
    }
  }
}

async function boot(): Promise<void> {
  $("#delta").addEventListener("input", () => {
    $("#delta-value").textContent = `₱${Number(($("#delta") as HTMLInputElement).value)}K`;
  });
  $("#run").addEventListener("click", () => void launch());
  $("#connect").addEventListener("click", async () => {
    try {
      renderSystem(await api().system());
      $("#form-error").textContent = "";
    } catch (error) {
      $("#form-error").textContent = `cannot reach service: ${String(error)}`;
    }
  });
  try {
    renderSystem(await api().system());
  } catch {
    $("#system-line").textContent = "service not connected — set the base URL and press connect";
  }
  renderBoard();
}

if (typeof document !== "undefined") {
  void boot();
}
