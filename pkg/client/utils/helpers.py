from typing import Any, Dict, Iterable, List


def format_response(response: Dict[str, Any]) -> str:
    """Format gateway API response for display"""
    if "error" in response:
        return f"❌ Error: {response['error']}"

    if "endpoints" in response:
        endpoints = response["endpoints"]
        if not endpoints:
            return "📡 No endpoints configured"
        result = "📡 Endpoints:\n"
        for endpoint in endpoints:
            icon = {"online": "✅", "offline": "❌"}.get(endpoint.get("status"), "❔")
            result += f"  {icon} {endpoint.get('id', 'Unknown')} ({endpoint.get('kind', '?')}): "
            result += f"{endpoint.get('status', 'unknown')}"
            failures = endpoint.get("consecutive_failures", 0)
            if failures:
                result += f", {failures} consecutive failures"
            result += "\n"
        return result

    if "metrics" in response:
        result = "📊 Gateway metrics:\n"
        for series, value in sorted(response["metrics"].items()):
            result += f"  • {series} = {value}\n"
        return result

    if "status" in response:
        return f"✅ {response.get('service', 'fedgate')}: {response['status']}"

    return str(response)


def format_size(size) -> str:
    """Human-readable byte count"""
    if size is None:
        return "-"
    value = float(size)
    for unit in ("B", "KB", "MB", "GB", "TB"):
        if value < 1024 or unit == "TB":
            return f"{int(value)} {unit}" if unit == "B" else f"{value:.1f} {unit}"
        value /= 1024
    return f"{size} B"


def format_entries(entries: List[Dict[str, Any]]) -> str:
    """Format a PROPFIND listing (self first, then children)"""
    if not entries:
        return "📁 Nothing found"
    own, children = entries[0], entries[1:]
    result = f"📁 {own['path']}\n"
    if not own["is_directory"]:
        return result + f"  {own['name']} {format_size(own.get('size'))}\n"
    if not children:
        return result + "  (empty)\n"
    for entry in children:
        if entry["is_directory"]:
            result += f"  📁 {entry['name']}/\n"
        else:
            result += f"  📄 {entry['name']} {format_size(entry.get('size'))}\n"
    return result


def format_replicas(path: str, replicas: Iterable[Any], complete: bool = True) -> str:
    """Ranked replica list, nearest first"""
    replicas = list(replicas)
    if not replicas:
        return f"🔍 {path}: no replica found" + ("" if complete else " (some endpoints did not answer)")
    result = f"🔍 {path}:\n"
    for i, replica in enumerate(replicas, 1):
        kind = "directory" if replica.is_directory else format_size(replica.size)
        result += f"  {i}. {replica.endpoint_id}: {replica.backend_path} ({kind})\n"
    if not complete:
        result += "  ⚠️  some endpoints did not answer before the deadline\n"
    return result
