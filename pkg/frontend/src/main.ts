import { mountApp } from "./app.js";

const params = new URLSearchParams(location.search);
const base =
  params.get("api") ?? localStorage.getItem("gradloom.api") ?? "http://127.0.0.1:8700";
localStorage.setItem("gradloom.api", base);

mountApp(document.getElementById("app")!, { base });
